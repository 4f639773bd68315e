"""Boundary side of the scattering data: Faddeev kernel, the boundary integral
equation for the CGO traces, and the scattering transform from DN matrices.

All boundary computations run on the unit disc; DN matrices must be the
unit-disc normalized ones produced by the forward module (the measured map
divided by the best-fit homogeneous constant).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import exp1

from .forward import CurrentPatternBasis
from .geometry import DomainDisc, KGrid


class BoundaryCGOError(RuntimeError):
    pass


def faddeev_greens(z, k):
    """Faddeev Green's function G_k(z) for the Laplacian, real valued.

    Evaluated through the exponential integral: G_k(z) = Re(E1(-i k z)) / 2pi
    with the principal branch of E1.  The sign of the argument matches the
    plane-wave convention e^{+i z.xi} used by the periodic solver; it is
    validated against direct quadrature of the defining integral.

    Singular at z = 0 (logarithmic) and undefined at k = 0.
    """
    z = np.asarray(z, dtype=complex)
    if np.any(z == 0):
        raise BoundaryCGOError("G_k has a logarithmic singularity at z = 0")
    if k == 0:
        raise BoundaryCGOError("G_k is undefined at k = 0")
    vals = np.real(exp1(-1j * k * z)) / (2.0 * np.pi)
    if vals.ndim == 0:
        return float(vals)
    return vals


@dataclass(frozen=True)
class FaddeevKernelMatrix:
    """Quadrature matrix for the single-layer style Faddeev kernel.

    Entries are w * G_k(z_l - zeta_l') with node weight w = 2pi/L (uniform
    trapezoidal weights at the electrode centers; for electrodes covering the
    whole boundary this equals the electrode arc length).  The diagonal uses
    the sub-sampling average over each electrode, skipping the singular
    center sample.
    """

    k: complex
    gamma: np.ndarray = field(repr=False)
    subsamples: int = 8


_LOG_AVG_CACHE: dict[float, float] = {}


def _electrode_log_average(arc_angle: float) -> float:
    """Average of ln|center - point| over an electrode arc of the unit circle.

    The chord distance is 2 sin(phi/2), so the average is
    (2/arc) * int_0^{arc/2} ln(2 sin(phi/2)) dphi, evaluated once per geometry.
    """
    key = round(arc_angle, 15)
    if key not in _LOG_AVG_CACHE:
        from scipy.integrate import quad

        val = quad(lambda p: np.log(2.0 * np.sin(p / 2.0)), 0.0, arc_angle / 2.0)[0]
        _LOG_AVG_CACHE[key] = 2.0 * val / arc_angle
    return _LOG_AVG_CACHE[key]


def gamma_matrix(k: complex, domain: DomainDisc, S: int = 8) -> FaddeevKernelMatrix:
    """Assemble the L x L Faddeev kernel matrix at frequency k.

    The diagonal averages G_k over each electrode by sub-sampling with the
    logarithmic singularity split off: the ln part is integrated exactly in
    closed form and only the smooth remainder G_k(z) + ln|z|/2pi is sampled
    (its z -> 0 limit is -(ln|k| + gamma_E)/2pi).  Halving S then moves the
    diagonal well below the percent level.
    """
    if S < 2:
        raise BoundaryCGOError(f"need at least 2 electrode sub-samples, got {S}")
    if k == 0:
        raise BoundaryCGOError("gamma matrix undefined at k = 0")
    L = domain.electrode_count
    centers = np.exp(1j * domain.electrode_angles)  # unit circle
    w = domain.angular_spacing
    diff = centers[:, None] - centers[None, :]
    gam = np.zeros((L, L))
    off = ~np.eye(L, dtype=bool)
    gam[off] = w * faddeev_greens(diff[off], k)

    arc = domain.electrode_area / domain.radius
    offsets = arc * (np.linspace(0.0, 1.0, S) - 0.5)
    log_avg = _electrode_log_average(arc)
    reg_limit = -(np.log(abs(k)) + np.euler_gamma) / (2.0 * np.pi)
    for l in range(L):
        sub = np.exp(1j * (domain.electrode_angles[l] + offsets))
        d = centers[l] - sub
        good = np.abs(d) > 1e-12
        reg = np.full(S, reg_limit)
        reg[good] = faddeev_greens(d[good], k) + np.log(np.abs(d[good])) / (2.0 * np.pi)
        gam[l, l] = w * (reg.mean() - log_avg / (2.0 * np.pi))
    return FaddeevKernelMatrix(k=k, gamma=gam, subsamples=S)


@dataclass(frozen=True)
class BoundaryCGOTrace:
    """Coefficients of the CGO trace psi|boundary in the orthonormal basis."""

    k: complex
    b_k: np.ndarray = field(repr=False)
    c_k: np.ndarray = field(repr=False)

    def psi_values(self, basis: CurrentPatternBasis, domain: DomainDisc) -> np.ndarray:
        """psi at the electrode centers; the mean of e^{ikz} restores the
        constant component that the mean-free basis cannot carry."""
        centers = np.exp(1j * domain.electrode_angles)
        e = np.exp(1j * self.k * centers)
        return basis.J @ self.b_k + e.mean()


def solve_bie(
    k: complex,
    L_sigma: np.ndarray,
    L_one: np.ndarray,
    basis: CurrentPatternBasis,
    domain: DomainDisc,
    S: int = 8,
    gamma: FaddeevKernelMatrix | None = None,
) -> BoundaryCGOTrace:
    """Solve [I + J^T Gamma_k J (L_sigma - L_one)] b_k = c_k by dense solve."""
    if k == 0:
        raise BoundaryCGOError("boundary integral equation undefined at k = 0")
    gamma = gamma or gamma_matrix(k, domain, S)
    J = basis.J
    centers = np.exp(1j * domain.electrode_angles)
    c_k = J.T @ np.exp(1j * k * centers)
    A = np.eye(basis.N) + J.T @ gamma.gamma @ J @ (L_sigma - L_one)
    try:
        b_k = np.linalg.solve(A.astype(complex), c_k)
    except np.linalg.LinAlgError as exc:
        raise BoundaryCGOError(f"singular BIE system at k = {k}") from exc
    resid = np.linalg.norm(A @ b_k - c_k) / np.linalg.norm(c_k)
    if resid > 1e-10:
        raise BoundaryCGOError(f"BIE solve at k = {k} has residual {resid:.3e}")
    return BoundaryCGOTrace(k=k, b_k=b_k, c_k=c_k)


@dataclass(frozen=True)
class ScatteringSampleBIE:
    k: complex
    t: complex


def t_bie(
    k: complex,
    trace: BoundaryCGOTrace,
    L_sigma: np.ndarray,
    L_one: np.ndarray,
    basis: CurrentPatternBasis,
    domain: DomainDisc,
) -> ScatteringSampleBIE:
    """Scattering transform sample from boundary data at one frequency.

    t(k) = sum_l w * e^{i conj(k) conj(z_l)} [J (L_sigma - L_one) b_k]_l
    with the same node weight w = 2pi/L as the kernel matrix.
    """
    if trace.k != k:
        raise BoundaryCGOError(f"trace computed at k = {trace.k}, requested {k}")
    centers = np.exp(1j * domain.electrode_angles)
    d = basis.J @ ((L_sigma - L_one) @ trace.b_k)
    w = domain.angular_spacing
    t = w * np.sum(np.exp(1j * np.conj(k) * np.conj(centers)) * d)
    return ScatteringSampleBIE(k=k, t=complex(t))


def scattering_from_dn(
    kgrid: KGrid,
    R1: float,
    L_sigma: np.ndarray,
    L_one: np.ndarray,
    basis: CurrentPatternBasis,
    domain: DomainDisc,
    S: int = 8,
) -> np.ndarray:
    """t from boundary data on every grid sample with 0 < |k| <= R1.

    Returns an (m, m) complex array, NaN outside the sampled disc.
    """
    out = np.full(kgrid.points.shape, np.nan, dtype=complex)
    mask = kgrid.disc_mask(R1)
    for idx in np.argwhere(mask):
        k = complex(kgrid.points[idx[0], idx[1]])
        trace = solve_bie(k, L_sigma, L_one, basis, domain, S=S)
        out[idx[0], idx[1]] = t_bie(k, trace, L_sigma, L_one, basis, domain).t
    return out


def save_scattering_csv(path, kgrid: KGrid, values: np.ndarray, flags: np.ndarray | None = None) -> None:
    """CSV rows (k_re, k_im, t_re, t_im[, provenance]) for defined samples."""
    mask = np.isfinite(values)
    ks = kgrid.points[mask]
    ts = values[mask]
    cols = [ks.real, ks.imag, ts.real, ts.imag]
    header = "k_re,k_im,t_re,t_im"
    if flags is not None:
        cols.append(flags[mask].astype(float))
        header += ",provenance"
    np.savetxt(path, np.stack(cols, axis=1), delimiter=",", header=header, comments="")
