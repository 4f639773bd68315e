"""Domains, electrode layout, polygonal regions, and computational grids.

All coordinates are complex numbers z = x + iy in millimetres unless noted.
The solver modules nondimensionalize by the domain radius internally, so the
types here are the single source of truth for physical layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Invalid domain, grid, or polygon input."""


@dataclass(frozen=True)
class DomainDisc:
    """Circular domain with L equispaced boundary electrodes.

    Parameters
    ----------
    radius : float
        Domain radius in mm.
    electrode_count : int
        Number of electrodes L (>= 2).
    coverage : float
        Fraction of the boundary covered by electrodes, in (0, 1].
        The electrode arc length is ``A = coverage * 2*pi*radius / L``.
    """

    radius: float
    electrode_count: int
    coverage: float = 0.5

    def __post_init__(self):
        if self.radius <= 0:
            raise GeometryError(f"radius must be positive, got {self.radius}")
        if self.electrode_count < 2:
            raise GeometryError("need at least 2 electrodes")
        if not (0.0 < self.coverage <= 1.0):
            raise GeometryError(f"coverage must be in (0, 1], got {self.coverage}")

    @property
    def angular_spacing(self) -> float:
        """Angle between adjacent electrode centers, 2*pi/L."""
        return 2.0 * np.pi / self.electrode_count

    @property
    def electrode_area(self) -> float:
        """Arc length of one electrode in mm (2-D "area")."""
        return self.coverage * 2.0 * np.pi * self.radius / self.electrode_count

    @property
    def electrode_angles(self) -> np.ndarray:
        """Angular positions of the electrode centers."""
        L = self.electrode_count
        return 2.0 * np.pi * np.arange(L) / L

    @property
    def electrode_centers(self) -> np.ndarray:
        """Electrode center points on the circle, as complex mm coordinates."""
        return self.radius * np.exp(1j * self.electrode_angles)

    def electrode_arc_bounds(self) -> np.ndarray:
        """(L, 2) array of angular [start, end] of each electrode arc."""
        half = self.electrode_area / self.radius / 2.0
        ang = self.electrode_angles
        return np.stack([ang - half, ang + half], axis=1)


@dataclass(frozen=True)
class ZGrid:
    """Uniform n x n spatial grid covering the bounding square of the domain.

    ``points`` are complex mm coordinates; ``domain_mask`` is True for points
    with |z| <= radius.  The grid always contains the origin (n odd).
    """

    n: int
    radius: float
    points: np.ndarray = field(repr=False)
    spacing: float = 0.0
    domain_mask: np.ndarray = field(default=None, repr=False)

    @property
    def x(self) -> np.ndarray:
        return self.points.real

    @property
    def y(self) -> np.ndarray:
        return self.points.imag


def build_zgrid(radius: float, n: int) -> ZGrid:
    """Build the n x n reconstruction grid on [-radius, radius]^2.

    ``n`` must be odd so the origin is a sample point.
    """
    if radius <= 0:
        raise GeometryError(f"radius must be positive, got {radius}")
    if n < 2:
        raise GeometryError(f"n must be at least 2, got {n}")
    if n % 2 == 0:
        raise GeometryError(f"n must be odd so the origin is a grid point, got {n}")
    axis = np.linspace(-radius, radius, n)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    points = X + 1j * Y
    spacing = 2.0 * radius / (n - 1)
    mask = np.abs(points) <= radius + 1e-12 * radius
    return ZGrid(n=n, radius=radius, points=points, spacing=spacing, domain_mask=mask)


@dataclass(frozen=True)
class KGrid:
    """Uniform m x m grid of complex frequencies covering [-kmax, kmax).

    The origin is always a grid point (index m//2 on each axis) and is flagged
    excluded: integrands of the scattering machinery are singular at k = 0.
    """

    m: int
    kmax: float
    points: np.ndarray = field(repr=False)
    spacing: float = 0.0

    @property
    def origin_index(self) -> tuple[int, int]:
        return (self.m // 2, self.m // 2)

    def origin_excluded_mask(self) -> np.ndarray:
        """True everywhere except at the k = 0 sample."""
        mask = np.ones((self.m, self.m), dtype=bool)
        mask[self.origin_index] = False
        return mask

    def disc_mask(self, R: float, include_origin: bool = False) -> np.ndarray:
        """Boolean mask of samples with |k| <= R; k = 0 excluded by default."""
        mask = np.abs(self.points) <= R + 1e-12 * max(R, 1.0)
        if not include_origin:
            mask &= self.origin_excluded_mask()
        return mask

    def annulus_mask(self, R1: float, R2: float) -> np.ndarray:
        """Samples with R1 < |k| <= R2."""
        r = np.abs(self.points)
        return (r > R1 + 1e-12 * max(R1, 1.0)) & (r <= R2 + 1e-12 * max(R2, 1.0))

    def crop(self, R: float, margin: float = 1.02) -> "KGrid":
        """Centered sub-grid with the same spacing covering |k| <= R*margin.

        Keeps the origin on the grid; used to shrink per-reconstruction work
        when the scattering data is supported on a smaller disc.
        """
        half = int(np.ceil(R * margin / self.spacing)) + 1
        half = min(half, self.m // 2)
        c = self.m // 2
        pts = self.points[c - half : c + half, c - half : c + half]
        return KGrid(m=2 * half, kmax=half * self.spacing, points=pts, spacing=self.spacing)


def build_kgrid(kmax: float, m: int) -> KGrid:
    """Build the m x m frequency grid with points (j - m/2) * (2*kmax/m).

    ``m`` must be even; the origin lands exactly on index m/2.
    """
    if kmax <= 0:
        raise GeometryError(f"kmax must be positive, got {kmax}")
    if m < 4 or m % 2:
        raise GeometryError(f"m must be an even integer >= 4, got {m}")
    h = 2.0 * kmax / m
    axis = (np.arange(m) - m // 2) * h
    K1, K2 = np.meshgrid(axis, axis, indexing="ij")
    return KGrid(m=m, kmax=kmax, points=K1 + 1j * K2, spacing=h)


def kgrid_for_radius(R: float, target_spacing: float = 1.0 / 3.0, margin: float = 1.05) -> KGrid:
    """Frequency grid whose square comfortably contains the disc |k| <= R."""
    kmax = margin * R + 2 * target_spacing
    m = max(int(2 * np.ceil(kmax / target_spacing)), 8)
    return build_kgrid(kmax, m)


@dataclass(frozen=True)
class PolygonRegion:
    """Simple polygon with a text label, vertices as complex mm coordinates."""

    label: str
    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=complex)
        if v.ndim != 1 or v.size < 3:
            raise GeometryError(f"polygon '{self.label}' needs >= 3 vertices")
        object.__setattr__(self, "vertices", v)

    @property
    def xy(self) -> np.ndarray:
        """(n, 2) float array of vertex coordinates."""
        return np.stack([self.vertices.real, self.vertices.imag], axis=1)

    def scaled(self, factor: float) -> "PolygonRegion":
        return PolygonRegion(self.label, self.vertices * factor)


def point_in_polygon(p: complex, poly: PolygonRegion) -> bool:
    """Even-odd (crossing number) test; points on the boundary count as inside.

    The boundary rule is the deterministic tie-break used by all raster masks.
    """
    return bool(points_in_polygon(np.asarray([p], dtype=complex), poly)[0])


def points_in_polygon(points: np.ndarray, poly: PolygonRegion) -> np.ndarray:
    """Vectorized crossing-number test for an array of complex points."""
    pts = np.asarray(points, dtype=complex)
    shape = pts.shape
    px = pts.real.ravel()
    py = pts.imag.ravel()
    vx = poly.vertices.real
    vy = poly.vertices.imag
    n = len(vx)
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    scale = max(np.abs(poly.vertices).max(), 1.0)
    tol = 1e-12 * scale
    for i in range(n):
        x1, y1 = vx[i], vy[i]
        x2, y2 = vx[(i + 1) % n], vy[(i + 1) % n]
        # boundary test: distance from point to segment below tolerance
        dx, dy = x2 - x1, y2 - y1
        seg2 = dx * dx + dy * dy
        if seg2 > 0:
            t = np.clip(((px - x1) * dx + (py - y1) * dy) / seg2, 0.0, 1.0)
        else:
            t = np.zeros_like(px)
        dist2 = (px - (x1 + t * dx)) ** 2 + (py - (y1 + t * dy)) ** 2
        on_edge |= dist2 <= tol * tol
        # crossing test for the ray going in +x direction
        cond = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * dx / np.where(dy == 0, 1.0, dy)
        inside ^= cond & (px < xint)
    return (inside | on_edge).reshape(shape)


def region_mask(region: PolygonRegion, grid: ZGrid) -> np.ndarray:
    """Boolean mask of grid points inside the region (boundary inclusive)."""
    return points_in_polygon(grid.points, region)


def clip_polygon_halfplane(
    poly: PolygonRegion, *, below: float | None = None, above: float | None = None, label: str | None = None
) -> PolygonRegion:
    """Sutherland-Hodgman clip of a polygon against a horizontal line.

    Exactly one of ``below``/``above`` must be given: keep the part with
    y <= below, or y >= above.  Raises if the intersection is empty.
    """
    if (below is None) == (above is None):
        raise GeometryError("specify exactly one of below= or above=")
    if below is not None:
        keep = lambda y: y <= below  # noqa: E731
        y0 = below
    else:
        keep = lambda y: y >= above  # noqa: E731
        y0 = above
    verts = list(poly.vertices)
    out: list[complex] = []
    n = len(verts)
    for i in range(n):
        a, b = verts[i], verts[(i + 1) % n]
        a_in, b_in = keep(a.imag), keep(b.imag)
        if a_in:
            out.append(a)
        if a_in != b_in:
            t = (y0 - a.imag) / (b.imag - a.imag)
            out.append(a + t * (b - a))
    if len(out) < 3:
        raise GeometryError(f"clipping '{poly.label}' leaves no polygon")
    return PolygonRegion(label or poly.label, np.asarray(out, dtype=complex))


def load_regions_json(path_or_obj) -> tuple[DomainDisc, list[PolygonRegion]]:
    """Load a domain plus polygon set from a JSON document.

    Schema::

        {"radius_mm": 143.2, "electrode_count": 32, "coverage": 0.5,
         "regions": [{"label": "heart", "vertices": [[x, y], ...]}, ...]}
    """
    if isinstance(path_or_obj, (str, bytes)) or hasattr(path_or_obj, "__fspath__"):
        with open(path_or_obj) as fh:
            doc = json.load(fh)
    else:
        doc = path_or_obj
    domain = DomainDisc(
        radius=float(doc["radius_mm"]),
        electrode_count=int(doc["electrode_count"]),
        coverage=float(doc.get("coverage", 0.5)),
    )
    regions = []
    for item in doc["regions"]:
        verts = np.asarray([complex(x, y) for x, y in item["vertices"]])
        if np.any(np.abs(verts) > domain.radius * (1 + 1e-9)):
            raise GeometryError(f"region '{item['label']}' has vertices outside the domain")
        regions.append(PolygonRegion(item["label"], verts))
    return domain, regions


def dump_regions_json(domain: DomainDisc, regions: list[PolygonRegion], path) -> None:
    doc = {
        "radius_mm": domain.radius,
        "electrode_count": domain.electrode_count,
        "coverage": domain.coverage,
        "regions": [
            {"label": r.label, "vertices": [[float(v.real), float(v.imag)] for v in r.vertices]}
            for r in regions
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
