"""The weighted D-bar integral equation and the conductivity image.

For each reconstruction point z the equation

    mu(z, .) = alpha + (1 - alpha) mu_int(z) + A[ T(.) / (4 pi conj(.)) e_{-z} conj(mu) ]

is solved on the frequency grid, where A is the Cauchy transform (convolution
with 1/(pi k)) realized by zero-padded FFTs on a doubled grid.  The equation
is real-linear (it conjugates the unknown), so the solver works on the
real/imaginary split; the right-hand side is constant in k, and by
real-linearity every weight alpha is a combination of the two canonical
solves with right-hand sides 1 and i.  sigma(z) = mu^2(z, 0), scaled back by
the best-fit homogeneous constant of the measured DN map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import fft2, ifft2

from .geometry import KGrid, ZGrid
from .krylov import bicgstab_batch
from .cgo_interior import ScatteringField


class DbarError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReconstructionParams:
    """Truncation radii, prior weight, and solver contract knobs."""

    r1: float
    r2: float | None = None
    alpha: float = 1.0
    tol: float = 1e-6
    maxiter: int = 500
    exterior_value: float = 1.0

    def __post_init__(self):
        r2 = self.r1 if self.r2 is None else self.r2
        object.__setattr__(self, "r2", r2)
        if self.r1 <= 0 or r2 < self.r1:
            raise DbarError(f"need 0 < R1 <= R2, got R1={self.r1}, R2={r2}")
        if not (0.0 <= self.alpha <= 1.0):
            raise DbarError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class MuIntField:
    """Disc average of the prior CGO solution over |k| <= R2, per z point."""

    values: np.ndarray = field(repr=False)  # (n, n) complex, defined on domain mask
    R2: float = 0.0


def compute_mu_int(mu_samples: np.ndarray, kpoints: np.ndarray, R2: float,
                   shape: tuple | None = None) -> MuIntField:
    """Average mu_pr over the sampled frequency disc.

    ``mu_samples`` has shape (nk, ...) with one slice per frequency in
    ``kpoints``; only samples with 0 < |k| <= R2 enter.  The average is the
    plain mean over included samples (summed-cell-area normalization), which
    keeps the constant-prior case exactly 1.
    """
    kpoints = np.asarray(kpoints)
    sel = (np.abs(kpoints) > 0) & (np.abs(kpoints) <= R2 * (1 + 1e-12))
    if not sel.any():
        raise DbarError(f"no frequency samples inside the disc |k| <= {R2}")
    vals = mu_samples[sel].mean(axis=0)
    if shape is not None:
        vals = vals.reshape(shape)
    return MuIntField(values=vals, R2=R2)


class MuIntAccumulator:
    """Streaming disc averages of mu_pr for several R2 radii at once.

    Frequencies are binned into shells by the sorted radii; the average for
    radius R2 uses every sample with |k| <= R2.
    """

    def __init__(self, radii: list[float], value_shape: tuple):
        self.radii = sorted(set(radii))
        self.sums = [np.zeros(value_shape, dtype=complex) for _ in self.radii]
        self.counts = [0] * len(self.radii)

    def _shell(self, k: complex) -> int:
        for i, r in enumerate(self.radii):
            if abs(k) <= r * (1 + 1e-12):
                return i
        return -1

    def add(self, k: complex, mu_values: np.ndarray) -> None:
        i = self._shell(k)
        if i >= 0:
            self.sums[i] += mu_values
            self.counts[i] += 1

    def add_batch(self, ks: np.ndarray, mu_batch: np.ndarray) -> None:
        for k, mu in zip(ks, mu_batch):
            self.add(complex(k), mu)

    def field(self, R2: float) -> MuIntField:
        total = None
        count = 0
        for i, r in enumerate(self.radii):
            if r <= R2 * (1 + 1e-12):
                total = self.sums[i] if total is None else total + self.sums[i]
                count += self.counts[i]
        if total is None or count == 0:
            raise DbarError(f"no accumulated samples for R2 = {R2}")
        return MuIntField(values=total / count, R2=R2)


def cauchy_kernel_fft(kgrid: KGrid) -> np.ndarray:
    """FFT of the 1/(pi k) kernel on the doubled (zero-padding) grid.

    The doubled grid makes the circular convolution equal to the linear one
    for data supported on the original grid; the kernel's own singular sample
    is set to 0 (symmetric cell average of 1/k vanishes).
    """
    M = kgrid.m
    h = kgrid.spacing
    idx = np.arange(2 * M)
    idx = np.where(idx < M, idx, idx - 2 * M)
    D1, D2 = np.meshgrid(idx, idx, indexing="ij")
    dk = (D1 + 1j * D2) * h
    E = np.zeros_like(dk)
    nz = dk != 0
    E[nz] = 1.0 / (np.pi * dk[nz])
    return fft2(E)


def cauchy_apply(g: np.ndarray, Ehat: np.ndarray, h: float) -> np.ndarray:
    """Cauchy transform of batched grid functions via the doubled-grid FFT."""
    B, M, _ = g.shape
    pad = np.zeros((B, 2 * M, 2 * M), dtype=complex)
    pad[:, :M, :M] = g
    conv = ifft2(fft2(pad, axes=(-2, -1)) * Ehat, axes=(-2, -1))[:, :M, :M]
    return conv * h * h


def _multiplier(T: ScatteringField) -> np.ndarray:
    """T(k) / (4 pi conj(k)), zero at k = 0 (t vanishes quadratically there)."""
    k = T.kgrid.points
    out = np.zeros_like(T.values)
    nz = k != 0
    out[nz] = T.values[nz] / (4.0 * np.pi * np.conj(k[nz]))
    return out


def dbar_matvec(mu: np.ndarray, mult_z: np.ndarray, Ehat: np.ndarray, h: float) -> np.ndarray:
    """[I - A T(conj .)] applied to a (B, M, M) batch of mu fields."""
    return mu - cauchy_apply(mult_z * np.conj(mu), Ehat, h)


@dataclass
class ConductivityImage:
    """Reconstructed conductivity on the z grid with solver diagnostics.

    ``values`` holds sigma in S/m on the full grid (exterior pixels set to
    the configured fill value); ``imag_residue`` is |Im mu^2| per pixel, kept
    so the dropped imaginary part stays visible.
    """

    grid: ZGrid
    values: np.ndarray = field(repr=False)
    params: ReconstructionParams | None = None
    metadata: dict = field(default_factory=dict)
    imag_residue: np.ndarray | None = field(default=None, repr=False)

    def masked_values(self) -> np.ndarray:
        return self.values[self.grid.domain_mask]

    def as_field(self):
        from .priors import ConductivityField

        return ConductivityField(grid=self.grid, values=self.values)


def sigma_from_mu(mu0):
    """Conductivity from the CGO solution at k = 0: Re(mu0^2)."""
    mu0 = np.asarray(mu0)
    vals = np.real(mu0**2)
    if vals.ndim == 0:
        return float(vals)
    return vals


def solve_dbar_at_z(
    z_unit: complex,
    T: ScatteringField,
    params: ReconstructionParams,
    mu_int_value: complex = 1.0,
) -> tuple[np.ndarray, complex]:
    """Solve the weighted D-bar equation at one z; returns (mu field, mu(z, 0)).

    ``z_unit`` is the reconstruction point in unit-disc coordinates.
    """
    Tc = T.crop(params.r2) if T.kgrid.kmax > params.r2 * 1.25 else T
    kg = Tc.kgrid
    Ehat = cauchy_kernel_fft(kg)
    msk = _multiplier(Tc)
    rhs_val = params.alpha + (1.0 - params.alpha) * complex(mu_int_value)
    phase = np.exp(-2j * (kg.points * z_unit).real)
    mult = (msk * phase)[None]

    def matvec(flat):
        mu = flat.reshape(1, kg.m, kg.m)
        return dbar_matvec(mu, mult, Ehat, kg.spacing).reshape(flat.shape)

    b = np.full((1, kg.m * kg.m), rhs_val, dtype=complex)
    x, rel, iters = bicgstab_batch(matvec, b, tol=params.tol, maxiter=params.maxiter)
    if rel[0] > params.tol:
        raise DbarError(f"D-bar solve did not converge at z = {z_unit} (residual {rel[0]:.2e})")
    mu = x.reshape(kg.m, kg.m)
    mu0 = complex(mu[kg.origin_index])
    return mu, mu0


def reconstruct_sweep(
    T: ScatteringField,
    params_list: list[ReconstructionParams],
    mu_int: MuIntField | None,
    zgrid: ZGrid,
    scale: float = 1.0,
    batch: int = 256,
    progress=None,
) -> list[ConductivityImage]:
    """Reconstructions for several alpha values sharing one R2 and one solve.

    All entries of ``params_list`` must share r1/r2/tol; by real-linearity in
    the constant right-hand side, the canonical solves with RHS 1 and RHS i
    give every weighted combination alpha + (1 - alpha) mu_int(z) exactly.
    """
    p0 = params_list[0]
    if any((p.r1, p.r2, p.tol, p.maxiter) != (p0.r1, p0.r2, p0.tol, p0.maxiter) for p in params_list):
        raise DbarError("sweep entries must share radii and solver settings")
    needs_muint = any(p.alpha < 1.0 for p in params_list)
    if needs_muint and mu_int is None:
        raise DbarError("alpha < 1 requires a mu_int field")

    Tc = T.crop(p0.r2) if T.kgrid.kmax > p0.r2 * 1.25 else T
    kg = Tc.kgrid
    M = kg.m
    Ehat = cauchy_kernel_fft(kg)
    msk = _multiplier(Tc)
    oi, oj = kg.origin_index

    mask = zgrid.domain_mask
    zpts = zgrid.points[mask] / zgrid.radius
    nz = zpts.size
    if needs_muint:
        mu_int_z = np.asarray(mu_int.values)[mask] if mu_int.values.shape == mask.shape else np.asarray(mu_int.values)
        if mu_int_z.shape != (nz,):
            raise DbarError("mu_int field does not match the reconstruction grid")
        # RHS = a + b i per alpha and z
        need_imag = any(
            p.alpha < 1.0 and np.abs((1 - p.alpha) * mu_int_z.imag).max() > 0 for p in params_list
        )
    else:
        mu_int_z = None
        need_imag = False

    mu0_one = np.zeros(nz, dtype=complex)
    mu0_imag = np.zeros(nz, dtype=complex)
    res_stats = {"max_residual": 0.0, "total_iterations": 0, "failed": 0}
    n_rhs = 2 if need_imag else 1

    for start in range(0, nz, batch):
        zb = zpts[start : start + batch]
        B = len(zb)
        phase = np.exp(-2j * (kg.points[None] * zb[:, None, None]).real)
        mult = msk[None] * phase

        def matvec(flat):
            mu = flat.reshape(-1, M, M)
            return dbar_matvec(mu, mult, Ehat, kg.spacing).reshape(flat.shape)

        rhs_sets = [np.ones((B, M * M), dtype=complex)]
        if need_imag:
            rhs_sets.append(np.full((B, M * M), 1j, dtype=complex))
        outs = []
        for rhs in rhs_sets:
            x, rel, iters = bicgstab_batch(matvec, rhs, tol=p0.tol, maxiter=p0.maxiter)
            res_stats["max_residual"] = max(res_stats["max_residual"], float(rel.max()))
            res_stats["total_iterations"] += int(iters.sum())
            res_stats["failed"] += int((rel > p0.tol).sum())
            outs.append(x.reshape(B, M, M)[:, oi, oj])
        mu0_one[start : start + B] = outs[0]
        if need_imag:
            mu0_imag[start : start + B] = outs[1]
        if progress is not None:
            progress(min(start + B, nz), nz)

    if res_stats["failed"] > 0.01 * nz * n_rhs:
        raise DbarError(f"{res_stats['failed']} per-z D-bar solves failed the residual contract")

    images = []
    for p in params_list:
        if p.alpha >= 1.0:
            mu0 = mu0_one.copy()
        else:
            w = p.alpha + (1.0 - p.alpha) * mu_int_z
            mu0 = w.real * mu0_one + w.imag * mu0_imag
        sq = mu0**2
        vals = np.full(zgrid.points.shape, p.exterior_value, dtype=float)
        vals[mask] = scale * sq.real
        imag = np.zeros(zgrid.points.shape)
        imag[mask] = scale * np.abs(sq.imag)
        meta = {
            "r1": p.r1, "r2": p.r2, "alpha": p.alpha, "scale": scale,
            "solver": dict(res_stats),
            "imag_rel_median": float(np.median(np.abs(sq.imag) / np.maximum(np.abs(sq), 1e-300))),
        }
        images.append(ConductivityImage(grid=zgrid, values=vals, params=p, metadata=meta, imag_residue=imag))
    return images


def reconstruct(
    T: ScatteringField,
    params: ReconstructionParams,
    mu_int: MuIntField | None,
    zgrid: ZGrid,
    scale: float = 1.0,
    batch: int = 256,
    progress=None,
) -> ConductivityImage:
    """Single-weight reconstruction over the domain-masked grid points."""
    return reconstruct_sweep(T, [params], mu_int, zgrid, scale=scale, batch=batch, progress=progress)[0]
