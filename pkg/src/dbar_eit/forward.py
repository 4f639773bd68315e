"""Current patterns, simulated voltage data, and discrete ND/DN matrices.

Conventions
-----------
* Adjacent bipolar patterns are orthonormalized columnwise (J^T J = I).
* ``simulate_voltages`` injects total currents ``A_u * J[:, m]`` per pattern,
  where ``A_u`` is the electrode arc length on the unit disc.  With that
  amplitude the applied boundary current *density* equals the pattern values,
  and the ND matrix below approximates the Neumann-to-Dirichlet map of the
  unit disc: for homogeneous conductivity its eigenvalues follow 1/|n|.
* The ND matrix is ``R = (dtheta / A) V^T J`` and the DN matrix its inverse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import DomainDisc
from .mesh import DATA_MESH, DiscMesh, FEMProblem, ForwardModelError, MeshConfig, disc_mesh, fem_solve_many


@dataclass(frozen=True)
class CurrentPatternBasis:
    """Adjacent bipolar current patterns and their orthonormalized basis."""

    L: int
    raw_bipolar: np.ndarray = field(repr=False)  # (L, N)
    J: np.ndarray = field(repr=False)  # (L, N), J^T J = I

    @property
    def N(self) -> int:
        return self.raw_bipolar.shape[1]


def adjacent_patterns(L: int) -> np.ndarray:
    """(L, L-1) matrix of adjacent drive patterns: +1 at m, -1 at m+1."""
    if L < 3:
        raise ForwardModelError(f"need at least 3 electrodes, got {L}")
    N = L - 1
    raw = np.zeros((L, N))
    idx = np.arange(N)
    raw[idx, idx] = 1.0
    raw[idx + 1, idx] = -1.0
    return raw


def orthonormalize_patterns(raw: np.ndarray) -> np.ndarray:
    """Stabilized Gram-Schmidt in fixed column order (deterministic).

    Columns must be linearly independent; zero-sum columns stay zero-sum.
    """
    raw = np.asarray(raw, dtype=float)
    L, N = raw.shape
    J = raw.copy()
    for m in range(N):
        v = J[:, m]
        for _ in range(2):  # one re-orthogonalization pass for stability
            v = v - J[:, :m] @ (J[:, :m].T @ v)
        norm = np.linalg.norm(v)
        if norm < 1e-12 * max(1.0, np.linalg.norm(raw[:, m])):
            raise ForwardModelError(f"current patterns are rank deficient at column {m}")
        J[:, m] = v / norm
    return J


def make_pattern_basis(L: int) -> CurrentPatternBasis:
    raw = adjacent_patterns(L)
    return CurrentPatternBasis(L=L, raw_bipolar=raw, J=orthonormalize_patterns(raw))


@dataclass(frozen=True)
class VoltageFrame:
    """Electrode voltages, one column per orthonormalized current pattern.

    Columns are mean free (grounded).  ``noise_level`` is the fraction of
    max |V| used as the noise standard deviation; 0 for clean data.
    """

    V: np.ndarray = field(repr=False)  # (L, N)
    noise_level: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        V = np.asarray(self.V, dtype=float)
        if not np.all(np.isfinite(V)):
            raise ForwardModelError("voltage frame contains non-finite entries")
        object.__setattr__(self, "V", V)


def piecewise_sigma_on_mesh(mesh: DiscMesh, domain: DomainDisc, sigma_fn) -> np.ndarray:
    """Per-element conductivity sampled at centroids; sigma_fn takes complex mm."""
    z_mm = mesh.centroids() * domain.radius
    return np.asarray(sigma_fn(z_mm), dtype=float)


def simulate_voltages(problem: FEMProblem, basis: CurrentPatternBasis) -> VoltageFrame:
    """One CEM solve per orthonormalized pattern, sharing the factorization."""
    domain = problem.domain
    if basis.L != domain.electrode_count:
        raise ForwardModelError("pattern basis and domain electrode counts differ")
    amplitude = domain.electrode_area / domain.radius  # unit-disc arc
    U = fem_solve_many(problem, amplitude * basis.J)
    return VoltageFrame(V=U, noise_level=0.0, seed=None)


def add_noise(frame: VoltageFrame, level: float, seed: int) -> VoltageFrame:
    """Add zero-mean Gaussian noise with std = level * max|V|, then re-ground.

    Deterministic for a given seed; level 0 returns the frame unchanged.
    """
    if level < 0:
        raise ForwardModelError(f"noise level must be >= 0, got {level}")
    if level == 0:
        return frame
    rng = np.random.default_rng(seed)
    scale = level * np.abs(frame.V).max()
    noisy = frame.V + rng.normal(0.0, scale, size=frame.V.shape)
    noisy -= noisy.mean(axis=0, keepdims=True)
    return VoltageFrame(V=noisy, noise_level=level, seed=seed)


def nd_from_data(J: np.ndarray, V: np.ndarray, A: float, dtheta: float) -> np.ndarray:
    """Discrete ND matrix R = (dtheta / A) V^T J.

    ``A`` is the electrode arc length in the same normalization as the data
    (the pipeline passes the unit-disc arc).
    """
    J = np.asarray(J, dtype=float)
    V = np.asarray(V, dtype=float)
    if J.shape != V.shape:
        raise ForwardModelError(f"shape mismatch: J {J.shape} vs V {V.shape}")
    return (dtheta / A) * V.T @ J


def dn_from_nd(R: np.ndarray, cond_limit: float = 1e12) -> np.ndarray:
    """DN matrix L = R^{-1}; raises with a diagnostic if R is ill conditioned."""
    R = np.asarray(R, dtype=float)
    cond = np.linalg.cond(R)
    if not np.isfinite(cond) or cond > cond_limit:
        raise ForwardModelError(f"ND matrix is ill conditioned (cond ~ {cond:.3g})")
    return np.linalg.inv(R)


_HOMOGENEOUS_CACHE: dict[tuple, np.ndarray] = {}


def homogeneous_dn(
    domain: DomainDisc,
    basis: CurrentPatternBasis,
    mesh_config: MeshConfig | None = None,
    contact_impedance: float = 1e-3,
) -> np.ndarray:
    """DN matrix for sigma = 1, from FEM data on the reference mesh (cached)."""
    from .mesh import REFERENCE_MESH

    cfg = mesh_config or REFERENCE_MESH
    key = (domain.radius, domain.electrode_count, domain.coverage,
           cfg.boundary_nodes_per_electrode, contact_impedance)
    if key in _HOMOGENEOUS_CACHE:
        return _HOMOGENEOUS_CACHE[key]
    mesh = disc_mesh(domain, cfg)
    problem = FEMProblem(domain=domain, mesh=mesh, sigma=np.ones(mesh.triangles.shape[0]),
                         contact_impedance=contact_impedance)
    frame = simulate_voltages(problem, basis)
    A_u = domain.electrode_area / domain.radius
    L1 = dn_from_nd(nd_from_data(basis.J, frame.V, A_u, domain.angular_spacing))
    _HOMOGENEOUS_CACHE[key] = L1
    return L1


def fit_reference_scale(R_sigma: np.ndarray, L_one: np.ndarray) -> float:
    """Best-fit constant c with R_sigma ~ (1/c) R_one, fitted on the ND side.

    For conductivities equal to a constant c near the boundary the maps obey
    Lambda_{sigma} ~ c Lambda_1.  Fitting on the ND matrices weights the fit
    toward the low-frequency components, which both the measurements and the
    FEM reference resolve best.  The scattering machinery then works with
    L_sigma / c against L_one, and the final image is scaled back by c.
    """
    R_one = np.linalg.inv(L_one)
    num = float(np.sum(R_sigma * R_one))
    den = float(np.sum(R_sigma * R_sigma))
    if den <= 0:
        raise ForwardModelError("ND matrix is zero")
    c = num / den
    if c <= 0:
        raise ForwardModelError(f"non-positive reference scale {c}")
    return c


def simulate_dataset(
    domain: DomainDisc,
    sigma_fn,
    basis: CurrentPatternBasis | None = None,
    noise_level: float = 0.0,
    seed: int = 0,
    data_mesh: MeshConfig = DATA_MESH,
    reference_mesh: MeshConfig | None = None,
    contact_impedance: float = 1e-3,
) -> dict:
    """Full measurement simulation: phantom voltages, DN matrices, scale fit.

    Returns a dict with keys ``basis, frame, R_sigma, L_sigma, L_one, c``.
    The homogeneous reference uses a different mesh than the data by default.
    """
    basis = basis or make_pattern_basis(domain.electrode_count)
    mesh = disc_mesh(domain, data_mesh)
    sig = piecewise_sigma_on_mesh(mesh, domain, sigma_fn)
    problem = FEMProblem(domain=domain, mesh=mesh, sigma=sig, contact_impedance=contact_impedance)
    frame = add_noise(simulate_voltages(problem, basis), noise_level, seed)
    A_u = domain.electrode_area / domain.radius
    R_sigma = nd_from_data(basis.J, frame.V, A_u, domain.angular_spacing)
    L_sigma = dn_from_nd(R_sigma)
    L_one = homogeneous_dn(domain, basis, reference_mesh, contact_impedance)
    c = fit_reference_scale(R_sigma, L_one)
    return {"basis": basis, "frame": frame, "R_sigma": R_sigma,
            "L_sigma": L_sigma, "L_one": L_one, "c": c}


def save_voltage_frame(frame: VoltageFrame, domain: DomainDisc, csv_path, sidecar_path=None) -> None:
    """CSV of L rows x N columns plus a JSON sidecar with the geometry."""
    np.savetxt(csv_path, frame.V, delimiter=",", fmt="%.17g")
    if sidecar_path is not None:
        meta = {
            "radius_mm": domain.radius,
            "electrode_count": domain.electrode_count,
            "coverage": domain.coverage,
            "patterns": "adjacent-orthonormal",
            "noise_level": frame.noise_level,
            "seed": frame.seed,
        }
        with open(sidecar_path, "w") as fh:
            json.dump(meta, fh, indent=1)


def load_voltage_frame(csv_path, noise_level: float = 0.0, seed: int | None = None) -> VoltageFrame:
    V = np.loadtxt(csv_path, delimiter=",")
    return VoltageFrame(V=V, noise_level=noise_level, seed=seed)
