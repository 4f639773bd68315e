"""Interior side of the scattering data: Schrodinger potential, periodized
Faddeev solver, and the nonlinear Fourier transform of the prior.

Spatial computations run in unit-disc coordinates (lengths divided by the
domain radius), matching the dimensionless frequency variable used on the
boundary side.  The Lippmann-Schwinger equation is solved on a periodic
square large enough that periodic copies of the potential do not interact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.fft import fft2, ifft2
from scipy.interpolate import RectBivariateSpline

from .geometry import KGrid, ZGrid
from .krylov import solve_batched
from .priors import ConductivityField, PriorField


class InteriorCGOError(RuntimeError):
    pass


@dataclass(frozen=True)
class PeriodicGrid:
    """2^m x 2^m grid on the square [-s, s) in unit-disc coordinates.

    ``s`` must exceed twice the domain radius (= 2 in unit coordinates) so
    the compactly supported potential cannot touch its periodic images.
    ``xi`` holds the complex Fourier frequencies in FFT layout.
    """

    m_exp: int
    s: float
    points: np.ndarray = field(repr=False)
    spacing: float = 0.0
    xi: np.ndarray = field(repr=False, default=None)

    @property
    def size(self) -> int:
        return 2**self.m_exp


def build_periodic_grid(m_exp: int = 8, s: float = 2.1) -> PeriodicGrid:
    if s < 2.0:
        raise InteriorCGOError(f"periodization half-side must be >= 2 (unit radii), got {s}")
    N = 2**m_exp
    h = 2.0 * s / N
    axis = (np.arange(N) - N // 2) * h
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    freqs = 2.0 * np.pi * np.fft.fftfreq(N, d=h)
    F1, F2 = np.meshgrid(freqs, freqs, indexing="ij")
    return PeriodicGrid(m_exp=m_exp, s=s, points=X + 1j * Y, spacing=h, xi=F1 + 1j * F2)


def periodized_gk(k: complex, grid: PeriodicGrid) -> np.ndarray:
    """Fourier multiplier table of the periodized Faddeev fundamental solution.

    The operator -Laplace - 4ik dbar has symbol xi (conj(xi) + 2k); its
    inverse is sampled on the grid frequencies.  The zero frequency is
    excluded (set to 0).  Frequency cells that land accidentally close to the
    other zero of the symbol (conj(xi) = -2k) would overweight one mode, so
    such cells get the cell-averaged inverse symbol instead of the point
    value.  Convolution with g_k is then ifft2(table * fft2(f)).
    """
    if k == 0:
        raise InteriorCGOError("periodized fundamental solution undefined at k = 0")
    xi = grid.xi
    dxi = 2.0 * np.pi / (2.0 * grid.s)
    den = xi * (np.conj(xi) + 2.0 * k)
    out = np.zeros_like(den)
    good = np.abs(den) > 1e-14
    out[good] = 1.0 / den[good]

    close = (np.abs(np.conj(xi) + 2.0 * k) < dxi) & (np.abs(xi) > 1e-14)
    if close.any():
        sub = (np.arange(16) + 0.5) / 16.0 - 0.5
        S1, S2 = np.meshgrid(sub * dxi, sub * dxi, indexing="ij")
        offs = (S1 + 1j * S2).ravel()
        for i, j in np.argwhere(close):
            cell = xi[i, j] + offs
            out[i, j] = np.mean(1.0 / (cell * (np.conj(cell) + 2.0 * k)))
    return out


def conv_gk(symbol: np.ndarray, f: np.ndarray) -> np.ndarray:
    """g_k * f on the periodic grid; f may carry leading batch axes."""
    return ifft2(symbol * fft2(f, axes=(-2, -1)), axes=(-2, -1))


@dataclass(frozen=True)
class PotentialField:
    """Schrodinger potential samples on a ZGrid, unit-disc normalization.

    Zero outside the domain; the conductivity it came from must be constant
    near the boundary for that to hold.
    """

    grid: ZGrid
    q: np.ndarray = field(repr=False)


def _laplacian_ratio(sq: np.ndarray, h: float) -> np.ndarray:
    """(5-point Laplacian of sq) / sq with edge-replicated padding."""
    p = np.pad(sq, 1, mode="edge")
    lap = (p[2:, 1:-1] + p[:-2, 1:-1] + p[1:-1, 2:] + p[1:-1, :-2] - 4.0 * p[1:-1, 1:-1]) / h**2
    return lap / sq


def q_from_sigma(sigma_pr: ConductivityField) -> PotentialField:
    """q = Laplace(sqrt(sigma)) / sqrt(sigma) on the grid, zero outside the domain.

    The Laplacian uses the grid spacing divided by the domain radius, so q is
    expressed in the same dimensionless coordinates as the frequency k.
    """
    if np.any(sigma_pr.values <= 0):
        raise InteriorCGOError("conductivity must be positive")
    grid = sigma_pr.grid
    h_u = grid.spacing / grid.radius
    q = _laplacian_ratio(np.sqrt(sigma_pr.values), h_u)
    q[~grid.domain_mask] = 0.0
    return PotentialField(grid=grid, q=q)


def periodic_potential(source, pgrid: PeriodicGrid, zgrid: ZGrid | None = None) -> np.ndarray:
    """Potential q sampled on the periodic grid.

    ``source`` is one of
      * PriorField: its piecewise recipe is re-rasterized on the periodic grid
        and mollified there, giving a potential free of cross-grid
        interpolation error,
      * ConductivityField: sqrt(sigma) is spline-interpolated onto the grid,
      * callable sigma(z_unit): evaluated directly (analytic test fields).
    """
    pts = pgrid.points
    if isinstance(source, PriorField):
        zg = source.sigma_tilde.grid
        radius = zg.radius
        # rebuild the piecewise field on the periodic grid (unit coords)
        from .priors import evaluate_piecewise

        vals = evaluate_piecewise(list(source.regions), source.values, pts * radius)
        if source.mollification_radius > 0:
            from scipy.ndimage import gaussian_filter

            sig_px = source.mollification_radius / radius / pgrid.spacing
            vals = gaussian_filter(vals, sigma=sig_px, truncate=4.0, mode="constant",
                                   cval=source.background)
        sigma_p = vals
    elif isinstance(source, ConductivityField):
        zg = source.grid
        axis = np.linspace(-1.0, 1.0, zg.n)
        spline = RectBivariateSpline(axis, axis, np.sqrt(source.values), kx=3, ky=3)
        background = float(np.sqrt(source.values[0, 0]))
        sq = np.full(pts.shape, background)
        inside = (np.abs(pts.real) <= 1.0) & (np.abs(pts.imag) <= 1.0)
        sq[inside] = spline.ev(pts.real[inside], pts.imag[inside])
        sigma_p = sq**2
    elif callable(source):
        sigma_p = np.asarray(source(pts), dtype=float)
    else:
        raise InteriorCGOError(f"cannot build a potential from {type(source)!r}")

    if np.any(sigma_p <= 0):
        raise InteriorCGOError("conductivity must be positive on the periodic grid")
    q = _laplacian_ratio(np.sqrt(sigma_p), pgrid.spacing)
    q[np.abs(pts) > 1.0] = 0.0
    return q


@dataclass(frozen=True)
class InteriorCGOField:
    """mu_pr(., k) on the periodic grid for one frequency."""

    k: complex
    pgrid: PeriodicGrid
    mu: np.ndarray = field(repr=False)

    def on_zgrid(self, zgrid: ZGrid) -> np.ndarray:
        return restrict_to_zgrid(self.mu[None], self.pgrid, zgrid)[0]


def solve_ls_batch(
    q_p: np.ndarray,
    ks: np.ndarray,
    pgrid: PeriodicGrid,
    tol: float = 1e-6,
    maxiter: int = 500,
    chunk: int = 48,
):
    """Solve [I + g_k * (q .)] mu = 1 for a batch of frequencies.

    Returns (mu, residuals, iterations) with mu of shape (len(ks), N, N).
    Frequencies are processed in chunks to bound the Krylov working set.
    """
    ks = np.asarray(ks, dtype=complex)
    if np.any(ks == 0):
        raise InteriorCGOError("Lippmann-Schwinger solve undefined at k = 0")
    N = pgrid.size
    mu = np.empty((len(ks), N, N), dtype=complex)
    rel = np.empty(len(ks))
    iters = np.empty(len(ks), dtype=int)
    for start in range(0, len(ks), chunk):
        kc = ks[start : start + chunk]
        symbols = np.stack([periodized_gk(k, pgrid) for k in kc])

        def matvec(flat):
            m = flat.reshape(-1, N, N)
            out = m + conv_gk(symbols, q_p[None] * m)
            return out.reshape(flat.shape)

        b = np.ones((len(kc), N * N), dtype=complex)
        x, r, it = solve_batched(matvec, b, tol=tol, maxiter=maxiter, what="Lippmann-Schwinger")
        mu[start : start + len(kc)] = x.reshape(-1, N, N)
        rel[start : start + len(kc)] = r
        iters[start : start + len(kc)] = it
    return mu, rel, iters


def solve_ls(q: PotentialField | np.ndarray, k: complex, pgrid: PeriodicGrid | None = None,
             tol: float = 1e-6, maxiter: int = 500) -> InteriorCGOField:
    """Single-frequency Lippmann-Schwinger solve.

    Accepts either a grid PotentialField (interpolated onto the periodic
    grid via its conductivity-free samples) or a ready (N, N) potential.
    """
    pgrid = pgrid or build_periodic_grid()
    if isinstance(q, PotentialField):
        q_p = embed_potential(q, pgrid)
    else:
        q_p = np.asarray(q, dtype=float)
    mu, rel, _ = solve_ls_batch(q_p, np.asarray([k]), pgrid, tol=tol, maxiter=maxiter)
    return InteriorCGOField(k=k, pgrid=pgrid, mu=mu[0])


def embed_potential(q: PotentialField, pgrid: PeriodicGrid) -> np.ndarray:
    """Linear interpolation of a ZGrid potential onto the periodic grid."""
    zg = q.grid
    axis = np.linspace(-1.0, 1.0, zg.n)
    spline = RectBivariateSpline(axis, axis, q.q, kx=1, ky=1)
    pts = pgrid.points
    out = np.zeros(pts.shape)
    inside = np.abs(pts) <= 1.0
    out[inside] = spline.ev(pts.real[inside], pts.imag[inside])
    return out


def restrict_to_zgrid(mu_batch: np.ndarray, pgrid: PeriodicGrid, zgrid: ZGrid) -> np.ndarray:
    """Bilinear restriction of periodic-grid fields onto the z grid.

    Input (B, N, N), output (B, n, n); z coordinates are divided by the
    domain radius to land in the periodic square.
    """
    N = pgrid.size
    h = pgrid.spacing
    zu = zgrid.points / zgrid.radius
    fx = (zu.real + pgrid.s) / h
    fy = (zu.imag + pgrid.s) / h
    ix = np.clip(fx.astype(int), 0, N - 2)
    iy = np.clip(fy.astype(int), 0, N - 2)
    wx = fx - ix
    wy = fy - iy
    m00 = mu_batch[:, ix, iy]
    m10 = mu_batch[:, ix + 1, iy]
    m01 = mu_batch[:, ix, iy + 1]
    m11 = mu_batch[:, ix + 1, iy + 1]
    return (m00 * (1 - wx) * (1 - wy) + m10 * wx * (1 - wy)
            + m01 * (1 - wx) * wy + m11 * wx * wy)


def t_pr(k: complex, q_p: np.ndarray, mu: np.ndarray, pgrid: PeriodicGrid) -> complex:
    """Nonlinear Fourier transform sample of the prior potential.

    t_pr(k) = sum q(z) e^{i(kz + conj(kz))} mu(z, k) h^2; the quadrature over
    the full periodic grid equals the one over supp(q) since q vanishes
    outside the domain.
    """
    return complex(t_pr_batch(np.asarray([k]), q_p, mu[None], pgrid)[0])


def t_pr_batch(ks: np.ndarray, q_p: np.ndarray, mu_batch: np.ndarray, pgrid: PeriodicGrid) -> np.ndarray:
    ks = np.asarray(ks, dtype=complex)
    z = pgrid.points
    phase = np.exp(2j * (ks[:, None, None] * z[None]).real)
    return (q_p[None] * phase * mu_batch).sum(axis=(-2, -1)) * pgrid.spacing**2


class Provenance(IntEnum):
    ZERO = 0
    BIE = 1
    PRIOR = 2


@dataclass(frozen=True)
class ScatteringField:
    """Piecewise scattering transform on a KGrid with per-sample provenance."""

    kgrid: KGrid
    values: np.ndarray = field(repr=False)
    flags: np.ndarray = field(repr=False)
    R1: float = 0.0
    R2: float = 0.0

    def crop(self, R: float, margin: float = 1.02) -> "ScatteringField":
        sub = self.kgrid.crop(R, margin)
        c = self.kgrid.m // 2
        half = sub.m // 2
        sl = slice(c - half, c + half)
        return ScatteringField(kgrid=sub, values=self.values[sl, sl],
                               flags=self.flags[sl, sl], R1=self.R1, R2=min(self.R2, R))


def assemble_piecewise_t(
    bie_samples: np.ndarray,
    prior_samples: np.ndarray | None,
    R1: float,
    R2: float,
    kgrid: KGrid,
) -> ScatteringField:
    """Combine boundary-data and prior scattering samples into one field.

    ``bie_samples`` must cover 0 < |k| <= R1 (NaN elsewhere is fine);
    ``prior_samples`` must cover R1 < |k| <= R2 when R2 > R1.  Outside R2 the
    field is identically zero, as is the k = 0 sample.
    """
    if R1 > R2:
        raise InteriorCGOError(f"need R1 <= R2, got {R1} > {R2}")
    values = np.zeros(kgrid.points.shape, dtype=complex)
    flags = np.zeros(kgrid.points.shape, dtype=np.uint8)

    bmask = kgrid.disc_mask(R1)
    if np.any(~np.isfinite(bie_samples[bmask])):
        raise InteriorCGOError("missing boundary scattering samples inside |k| <= R1")
    values[bmask] = bie_samples[bmask]
    flags[bmask] = Provenance.BIE

    amask = kgrid.annulus_mask(R1, R2)
    if amask.any():
        if prior_samples is None or np.any(~np.isfinite(prior_samples[amask])):
            raise InteriorCGOError("missing prior scattering samples in the annulus R1 < |k| <= R2")
        values[amask] = prior_samples[amask]
        flags[amask] = Provenance.PRIOR
    return ScatteringField(kgrid=kgrid, values=values, flags=flags, R1=R1, R2=R2)
