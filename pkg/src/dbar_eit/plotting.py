"""Figure rendering for reconstructions and scattering diagnostics.

Every plot is written straight to a PNG file (Agg backend, no display).
Reconstruction heatmaps embed their color-scale provenance in the PNG text
metadata so sweep figures can be checked for the shared per-noise scale.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import PolygonRegion, ZGrid


def render_conductivity_png(
    values: np.ndarray,
    grid: ZGrid,
    path,
    vmin: float | None = None,
    vmax: float | None = None,
    title: str = "",
    regions: list[PolygonRegion] | None = None,
    scale_tag: str = "per-image",
) -> None:
    """Heatmap of a conductivity field with the domain disc masked.

    ``scale_tag`` documents where (vmin, vmax) came from (for sweep figures:
    the per-noise-case shared scale) and is stored in the PNG metadata.
    """
    masked = np.ma.masked_where(~grid.domain_mask, values)
    if vmin is None:
        vmin = float(masked.min())
    if vmax is None:
        vmax = float(masked.max())
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    extent = (-grid.radius, grid.radius, -grid.radius, grid.radius)
    # values are indexed (ix, iy); transpose so x runs horizontally
    im = ax.imshow(masked.T, origin="lower", extent=extent, vmin=vmin, vmax=vmax, cmap="viridis")
    if regions:
        for r in regions:
            xy = np.vstack([r.xy, r.xy[:1]])
            ax.plot(xy[:, 0], xy[:, 1], "w-", lw=0.7, alpha=0.8)
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    if title:
        ax.set_title(title, fontsize=10)
    fig.colorbar(im, ax=ax, label="S/m", shrink=0.85)
    fig.tight_layout()
    meta = {
        "dbar-eit:vmin": f"{vmin:.8g}",
        "dbar-eit:vmax": f"{vmax:.8g}",
        "dbar-eit:scale": scale_tag,
    }
    fig.savefig(path, dpi=130, metadata=meta)
    plt.close(fig)


def render_scattering_png(values: np.ndarray, kgrid, path, title: str = "|T|") -> None:
    """Magnitude of a scattering field over the frequency grid."""
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    extent = (-kgrid.kmax, kgrid.kmax, -kgrid.kmax, kgrid.kmax)
    mag = np.abs(values)
    im = ax.imshow(mag.T, origin="lower", extent=extent, cmap="magma")
    ax.set_xlabel("Re k")
    ax.set_ylabel("Im k")
    ax.set_title(title, fontsize=10)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_mu_int_png(values: np.ndarray, grid: ZGrid, path, R2: float) -> None:
    """Real part of the prior disc-average term on the reconstruction grid."""
    render_conductivity_png(values.real, grid, path, title=f"Re mu_int, R2 = {R2:g}",
                            scale_tag="per-image")


def read_png_metadata(path) -> dict:
    """Text chunks of a PNG written by this module (used by tests/manifest)."""
    from PIL import Image

    with Image.open(path) as im:
        return dict(im.text) if hasattr(im, "text") else {}
