"""Phantoms and a priori conductivity distributions.

Two construction routes: blind estimates (tabulated guesses per organ) and
extraction from an existing reconstruction.  Both produce a piecewise
constant field on the grid which is then mollified so the downstream
Schrodinger potential is well defined; the smooth field stays equal to the
background constant near the domain boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import PolygonRegion, ZGrid, points_in_polygon, region_mask


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class ConductivityField:
    """Real conductivity samples on a ZGrid (S/m)."""

    grid: ZGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.points.shape:
            raise PriorError(f"values shape {v.shape} does not match grid {self.grid.points.shape}")
        object.__setattr__(self, "values", v)

    def masked(self) -> np.ndarray:
        """Values at the grid points inside the domain."""
        return self.values[self.grid.domain_mask]


@dataclass(frozen=True)
class ExtractionParams:
    """Thresholds for pulling organ values out of a reconstruction.

    ``c`` locates the conductive peak (heart); ``c1 < c2`` bracket the
    background band; both are fractions of the reconstruction's range.
    ``lung_divider`` is the ordinate (mm) splitting the left lung when a
    pathology makes its halves differ.
    """

    c: float = 0.85
    c1: float = 0.25
    c2: float = 0.95
    lung_divider: float | None = None
    pathology_subsets: tuple[PolygonRegion, ...] = ()

    def __post_init__(self):
        if not (0.5 < self.c < 1.0):
            raise PriorError(f"c must lie in (0.5, 1), got {self.c}")
        if not (0.0 < self.c1 < self.c2 < 1.0):
            raise PriorError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")


def validate_region_values(regions: list[PolygonRegion], values: dict[str, float]) -> None:
    if "background" not in values:
        raise PriorError("region value map must include 'background'")
    for r in regions:
        if r.label not in values:
            raise PriorError(f"no conductivity value for region '{r.label}'")
    for label, v in values.items():
        if v <= 0:
            raise PriorError(f"conductivity for '{label}' must be positive, got {v}")


def evaluate_piecewise(regions: list[PolygonRegion], values: dict[str, float], points: np.ndarray) -> np.ndarray:
    """Piecewise-constant conductivity at arbitrary complex points.

    Background outside all polygons; regions listed later override earlier
    ones on overlap (callers list lungs first, spine last).
    """
    validate_region_values(regions, values)
    out = np.full(np.shape(points), values["background"], dtype=float)
    for r in regions:
        inside = points_in_polygon(points, r)
        out[inside] = values[r.label]
    return out


def assemble_piecewise_sigma(regions: list[PolygonRegion], values: dict[str, float], grid: ZGrid) -> ConductivityField:
    """Rasterize the piecewise-constant conductivity onto the grid."""
    return ConductivityField(grid=grid, values=evaluate_piecewise(regions, values, grid.points))


def mollify(fld: ConductivityField, radius: float) -> ConductivityField:
    """Gaussian smoothing with standard deviation ``radius`` (mm).

    The kernel is truncated at 4 radii; outside the grid the field is
    extended by its corner value, which equals the background constant for
    fields built by :func:`assemble_piecewise_sigma`.  radius = 0 is the
    identity.  Min/max bounds of the input are preserved (convex averaging).
    """
    if radius < 0:
        raise PriorError(f"mollification radius must be >= 0, got {radius}")
    if radius == 0:
        return fld
    sigma_px = radius / fld.grid.spacing
    background = float(fld.values[0, 0])
    sm = gaussian_filter(fld.values, sigma=sigma_px, truncate=4.0, mode="constant", cval=background)
    return ConductivityField(grid=fld.grid, values=sm)


@dataclass(frozen=True)
class PriorField:
    """Piecewise prior, its mollified version, and the recipe that made it."""

    sigma_tilde: ConductivityField
    sigma_pr: ConductivityField
    mollification_radius: float
    regions: tuple[PolygonRegion, ...] = ()
    values: dict = field(default_factory=dict)

    @property
    def background(self) -> float:
        return float(self.values.get("background", self.sigma_pr.values[0, 0]))


def make_prior(
    regions: list[PolygonRegion],
    values: dict[str, float],
    grid: ZGrid,
    mollification_radius: float = 6.0,
) -> PriorField:
    tilde = assemble_piecewise_sigma(regions, values, grid)
    smooth = mollify(tilde, mollification_radius)
    if np.any(smooth.values <= 0):
        raise PriorError("mollified prior is not strictly positive")
    return PriorField(
        sigma_tilde=tilde,
        sigma_pr=smooth,
        mollification_radius=mollification_radius,
        regions=tuple(regions),
        values=dict(values),
    )


def blind_estimate_prior(
    regions: list[PolygonRegion],
    guesses: dict[str, float],
    grid: ZGrid,
    mollification_radius: float = 6.0,
) -> PriorField:
    """Prior from tabulated per-organ conductivity guesses."""
    return make_prior(regions, guesses, grid, mollification_radius)


def _region_mean(recon: ConductivityField, region: PolygonRegion) -> float:
    mask = region_mask(region, recon.grid) & recon.grid.domain_mask
    if not mask.any():
        raise PriorError(f"region '{region.label}' contains no grid points")
    return float(recon.values[mask].mean())


def extract_lungs(
    recon: ConductivityField,
    lung_regions: list[PolygonRegion],
    subsets: tuple[PolygonRegion, ...] = (),
) -> dict[str, float]:
    """Mean reconstructed value over each lung region (or over each subset).

    Subset polygons, when given, take precedence over the containing lung:
    their means are reported under the subset labels.
    """
    out = {}
    for r in lung_regions:
        out[r.label] = _region_mean(recon, r)
    for s in subsets:
        out[s.label] = _region_mean(recon, s)
    return out


def _omega_range(recon: ConductivityField) -> tuple[float, float]:
    vals = recon.masked()
    return float(vals.min()), float(vals.max())


def extract_heart_aorta(recon: ConductivityField, c: float) -> float:
    """Mean over the conductive peak H = {sigma >= min + c (max - min)}."""
    if not (0.5 < c < 1.0):
        raise PriorError(f"c must lie in (0.5, 1), got {c}")
    lo, hi = _omega_range(recon)
    tau = lo + c * (hi - lo)
    vals = recon.masked()
    H = vals >= tau
    if not H.any():
        raise PriorError(f"threshold c={c} leaves an empty peak set; use a smaller c")
    return float(vals[H].mean())


def extract_spine(recon: ConductivityField) -> float:
    """The most resistive value in the reconstruction."""
    return _omega_range(recon)[0]


def extract_background(recon: ConductivityField, c1: float, c2: float) -> float:
    """Mean over the band [tau1, tau2] of the reconstruction's range."""
    if not (0.0 < c1 < c2 < 1.0):
        raise PriorError(f"need 0 < c1 < c2 < 1, got {c1}, {c2}")
    lo, hi = _omega_range(recon)
    tau1 = lo + c1 * (hi - lo)
    tau2 = lo + c2 * (hi - lo)
    vals = recon.masked()
    B = (vals >= tau1) & (vals <= tau2)
    if not B.any():
        raise PriorError("background band is empty; widen [c1, c2]")
    return float(vals[B].mean())


def extract_values(
    recon: ConductivityField,
    regions: list[PolygonRegion],
    params: ExtractionParams,
) -> dict[str, float]:
    """All prior values from a reconstruction, keyed by region label."""
    lungs = [r for r in regions if "lung" in r.label]
    values = extract_lungs(recon, lungs, params.pathology_subsets)
    heart = extract_heart_aorta(recon, params.c)
    values["heart"] = heart
    values["aorta"] = heart  # the aorta carries blood at heart-like conductivity
    values["spine"] = extract_spine(recon)
    values["background"] = extract_background(recon, params.c1, params.c2)
    return values


def build_extraction_prior(
    recon: ConductivityField,
    regions: list[PolygonRegion],
    params: ExtractionParams,
    grid: ZGrid,
    mollification_radius: float = 6.0,
) -> PriorField:
    """Prior whose organ values are extracted from a reconstruction."""
    values = extract_values(recon, regions, params)
    return make_prior(regions, values, grid, mollification_radius)


def iterate_prior(
    recon_aposteriori: ConductivityField,
    regions: list[PolygonRegion],
    params: ExtractionParams,
    grid: ZGrid,
    mollification_radius: float = 6.0,
) -> PriorField:
    """Updated prior extracted from a completed a priori reconstruction.

    Same extraction machinery as :func:`build_extraction_prior`; feeding the
    weighted reconstruction back in lets pathologies absent from the original
    prior enter the next pass.
    """
    return build_extraction_prior(recon_aposteriori, regions, params, grid, mollification_radius)
