"""Default thoracic geometry: polygonal organ boundaries and conductivity tables.

The organ shapes are synthetic polygon approximations of a 2-D chest slice
(left lung drawn on the left-hand side of the image, anterior up).  They are
the stand-in for boundaries that a clinical workflow would segment from a CT
slice, and they drive the simulated test problems: a pleural effusion is
modeled by raising the conductivity in the lower part of the left lung.
"""

from __future__ import annotations

import numpy as np

from .geometry import DomainDisc, PolygonRegion, clip_polygon_halfplane

# conductivity values in S/m
PHANTOM_VALUES = {
    "background": 0.424,
    "heart": 0.750,
    "l_lung_top": 0.240,
    "l_lung_bottom": 0.600,
    "r_lung": 0.240,
    "aorta": 0.750,
    "spine": 0.150,
}

BLIND_ESTIMATE_VALUES = {
    "background": 0.500,
    "heart": 0.800,
    "l_lung_top": 0.200,
    "l_lung_bottom": 0.200,
    "r_lung": 0.200,
    "aorta": 0.800,
    "spine": 0.100,
}

# horizontal line y = fraction * radius separating "lung top" from "lung bottom"
PHANTOM_DIVIDER_FRACTION = -0.18
# the division used when extracting values from reconstructions: chosen by eye
# from blurred images, so deliberately not identical to the phantom's line
EXTRACTION_DIVIDER_FRACTION = -0.12

_HEART_CENTER = -0.10 + 0.40j
_HEART_AXES = (0.21, 0.17)
_HEART_TILT = np.deg2rad(-25.0)
_HEART_CLEARANCE = 0.33


def _ellipse(center: complex, a: float, b: float, tilt: float, n: int) -> np.ndarray:
    t = 2.0 * np.pi * np.arange(n) / n
    pts = a * np.cos(t) + 1j * b * np.sin(t)
    return center + pts * np.exp(1j * tilt)


def _lung(center: complex, a: float, b: float, tilt: float, n: int = 20) -> np.ndarray:
    """Lung outline: tilted ellipse pushed away from the heart region."""
    pts = _ellipse(center, a, b, tilt, n)
    d = pts - _HEART_CENTER
    dist = np.abs(d)
    close = dist < _HEART_CLEARANCE
    pts[close] = _HEART_CENTER + d[close] / dist[close] * _HEART_CLEARANCE
    # keep everything safely inside the unit disc
    r = np.abs(pts)
    far = r > 0.93
    pts[far] *= 0.93 / r[far]
    return pts


def thorax_regions(radius: float, divider_fraction: float = PHANTOM_DIVIDER_FRACTION) -> list[PolygonRegion]:
    """Organ polygons for a circular chest slice of the given radius (mm).

    The left lung is returned split into ``l_lung_top`` / ``l_lung_bottom``
    along the horizontal line y = divider_fraction * radius.  Listing order is
    the assembly precedence: lungs, then heart, aorta, spine.
    """
    left = PolygonRegion("l_lung", _lung(-0.43 - 0.05j, 0.30, 0.58, np.deg2rad(8.0)))
    right = PolygonRegion("r_lung", _lung(0.43 - 0.05j, 0.30, 0.58, np.deg2rad(-8.0)))
    heart = PolygonRegion("heart", _ellipse(_HEART_CENTER, *_HEART_AXES, _HEART_TILT, 14))
    aorta = PolygonRegion("aorta", _ellipse(-0.12 - 0.43j, 0.06, 0.06, 0.0, 10))
    spine = PolygonRegion("spine", _ellipse(0.0 - 0.72j, 0.13, 0.105, 0.0, 12))

    top = clip_polygon_halfplane(left, above=divider_fraction, label="l_lung_top")
    bottom = clip_polygon_halfplane(left, below=divider_fraction, label="l_lung_bottom")

    regions = [top, bottom, right, heart, aorta, spine]
    return [r.scaled(radius) for r in regions]


def paper_domain() -> DomainDisc:
    """The simulated tank: radius 143.2 mm, 32 electrodes."""
    return DomainDisc(radius=143.2, electrode_count=32)
