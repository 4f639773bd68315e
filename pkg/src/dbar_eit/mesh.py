"""Triangular disc meshes and the complete electrode model forward solver.

Meshing and FEM are done on the unit disc: the conductivity equation is
scale invariant in 2-D, so voltages for given total electrode currents do not
depend on the physical radius (contact impedance is rescaled accordingly).
Conductivity values keep their S/m numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csc_matrix
from scipy.sparse.linalg import splu
from scipy.spatial import Delaunay

from .geometry import DomainDisc


class ForwardModelError(RuntimeError):
    """FEM setup or solve failure."""


@dataclass(frozen=True)
class MeshConfig:
    """Mesh resolution knobs.

    ``boundary_nodes_per_electrode`` sets the boundary spacing (>= 8 for
    production data); data generation and the homogeneous reference should use
    different values so discretization error does not cancel silently.
    """

    boundary_nodes_per_electrode: int = 10

    def __post_init__(self):
        if self.boundary_nodes_per_electrode < 3:
            raise ForwardModelError("need at least 3 boundary nodes per electrode")


DATA_MESH = MeshConfig(boundary_nodes_per_electrode=10)
REFERENCE_MESH = MeshConfig(boundary_nodes_per_electrode=8)


@dataclass(frozen=True)
class DiscMesh:
    """Linear-triangle mesh of the unit disc with electrode-aligned boundary.

    ``electrode_edges[l]`` lists (i, j) node pairs of the boundary segments
    under electrode l; segment lengths are chord lengths.
    """

    nodes: np.ndarray  # (n, 2) unit-disc coordinates
    triangles: np.ndarray  # (m, 3) CCW node indices
    electrode_edges: list[np.ndarray] = field(repr=False)  # per electrode, (e_l, 2)
    boundary_count: int = 0

    @property
    def node_count(self) -> int:
        return self.nodes.shape[0]

    def centroids(self) -> np.ndarray:
        """(m,) complex element centroids on the unit disc."""
        p = self.nodes[self.triangles]
        c = p.mean(axis=1)
        return c[:, 0] + 1j * c[:, 1]


def disc_mesh(domain: DomainDisc, config: MeshConfig = DATA_MESH) -> DiscMesh:
    """Build a ring-structured unit-disc mesh aligned with the electrodes."""
    L = domain.electrode_count
    npe = config.boundary_nodes_per_electrode
    arc = domain.electrode_area / domain.radius  # electrode arc on unit circle
    bounds = domain.electrode_arc_bounds() / 1.0  # angles are radius free
    h = arc / (npe - 1)

    angles = []
    elec_spans = []
    for l in range(L):
        a0, a1 = bounds[l]
        elec = np.linspace(a0, a1, npe)
        start = len(angles)
        angles.extend(elec)
        elec_spans.append((start, start + npe))
        b0 = bounds[(l + 1) % L][0] + (2 * np.pi if l == L - 1 else 0.0)
        gap = b0 - a1
        if gap > 1e-12:
            ngap = max(1, int(round(gap / h)))
            angles.extend(np.linspace(a1, b0, ngap + 1)[1:-1])
    angles = np.asarray(angles)
    nb = len(angles)
    boundary = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    points = [boundary]
    nrings = max(3, int(round(1.0 / h)))
    dr = 1.0 / nrings
    for j in range(nrings - 1, 0, -1):
        r = j * dr
        # even node counts keep the mesh symmetric under rotation by pi
        nj = 2 * max(4, int(round(np.pi * r / h)))
        off = 0.5 * (2 * np.pi / nj) * (j % 2)
        t = 2 * np.pi * np.arange(nj) / nj + off
        points.append(np.stack([r * np.cos(t), r * np.sin(t)], axis=1))
    points.append(np.zeros((1, 2)))
    nodes = np.concatenate(points, axis=0)

    tri = Delaunay(nodes)
    simplices = tri.simplices.copy()
    p = nodes[simplices]
    area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 2, 0] - p[:, 0, 0]
    ) * (p[:, 1, 1] - p[:, 0, 1])
    flip = area2 < 0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]
    keep = np.abs(area2) > 1e-14
    simplices = simplices[keep]

    # boundary edges: consecutive boundary nodes in angle order
    order = np.argsort(angles)
    edges_by_electrode: list[list[tuple[int, int]]] = [[] for _ in range(L)]
    for a, b in zip(order, np.roll(order, -1)):
        mid = np.angle(np.exp(1j * 0.5 * (angles[a] + angles[b])))
        if angles[b] < angles[a]:  # wrap-around edge
            mid = np.angle(np.exp(1j * (angles[a] + 0.5 * ((angles[b] + 2 * np.pi) - angles[a]))))
        for l in range(L):
            a0, a1 = bounds[l]
            d = np.angle(np.exp(1j * (mid - 0.5 * (a0 + a1))))
            if abs(d) <= 0.5 * (a1 - a0) - 1e-9:
                edges_by_electrode[l].append((a, b))
                break
    electrode_edges = [np.asarray(e, dtype=int) for e in edges_by_electrode]
    for l, e in enumerate(electrode_edges):
        if len(e) < npe - 1:
            raise ForwardModelError(f"electrode {l} has too few boundary edges")
    return DiscMesh(nodes=nodes, triangles=simplices, electrode_edges=electrode_edges, boundary_count=nb)


@dataclass
class FEMProblem:
    """Complete electrode model problem on a disc mesh.

    ``sigma`` is per-element conductivity (S/m, positive).  ``contact_impedance``
    is given in Ohm*mm and rescaled by the domain radius internally.
    """

    domain: DomainDisc
    mesh: DiscMesh
    sigma: np.ndarray
    contact_impedance: float = 1e-3

    _lu: object = field(default=None, repr=False)

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.sigma.shape != (self.mesh.triangles.shape[0],):
            raise ForwardModelError("sigma must be one value per mesh element")
        if np.any(self.sigma <= 0):
            raise ForwardModelError("sigma must be positive everywhere")
        if self.contact_impedance <= 0:
            raise ForwardModelError("contact impedance must be positive")

    @property
    def z_eff(self) -> float:
        """Contact impedance in unit-disc normalization."""
        return self.contact_impedance / self.domain.radius

    def _factorize(self):
        if self._lu is not None:
            return self._lu
        mesh, L = self.mesh, self.domain.electrode_count
        n = mesh.node_count
        p = mesh.nodes[mesh.triangles]
        x, y = p[..., 0], p[..., 1]
        area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
        b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / (2 * area[:, None])
        c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / (2 * area[:, None])
        ke = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) * (self.sigma * area)[:, None, None]
        rows = np.repeat(mesh.triangles, 3, axis=1).reshape(-1)
        cols = np.tile(mesh.triangles, (1, 3)).reshape(-1)
        entries = [(rows, cols, ke.reshape(-1))]

        z = self.z_eff
        crow, ccol, cval = [], [], []
        dvals = np.zeros(L)
        for l, edges in enumerate(mesh.electrode_edges):
            pi = mesh.nodes[edges[:, 0]]
            pj = mesh.nodes[edges[:, 1]]
            ell = np.hypot(*(pj - pi).T)
            # edge mass (1/z) [l/3 l/6; l/6 l/3] into u-u block
            for (a_loc, b_loc, w) in ((0, 0, 1 / 3), (1, 1, 1 / 3), (0, 1, 1 / 6), (1, 0, 1 / 6)):
                entries.append((edges[:, a_loc], edges[:, b_loc], w * ell / z))
            # u-U coupling and electrode self term
            for a_loc in (0, 1):
                crow.append(edges[:, a_loc])
                ccol.append(np.full(len(edges), l))
                cval.append(0.5 * ell / z)
            dvals[l] = ell.sum() / z

        rows = np.concatenate([e[0] for e in entries])
        cols = np.concatenate([e[1] for e in entries])
        vals = np.concatenate([e[2] for e in entries])
        A11 = coo_matrix((vals, (rows, cols)), shape=(n, n))
        C = coo_matrix((np.concatenate(cval), (np.concatenate(crow), np.concatenate(ccol))), shape=(n, L))

        # bordered system enforcing sum(U) = 0
        dim = n + L + 1
        A11 = A11.tocoo()
        C = C.tocoo()
        rows = [A11.row, C.row, C.col + n, np.arange(L) + n, np.arange(L) + n, np.full(L, n + L), np.arange(L) + n]
        cols = [A11.col, C.col + n, C.row, np.arange(L) + n, np.full(L, n + L), np.arange(L) + n, np.arange(L) + n]
        vals = [A11.data, -C.data, -C.data, dvals, np.ones(L), np.ones(L), np.zeros(L)]
        M = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim))
        try:
            lu = splu(csc_matrix(M))
        except RuntimeError as exc:  # pragma: no cover
            raise ForwardModelError(f"CEM system factorization failed: {exc}") from exc
        self._lu = lu
        return lu


def fem_solve_cem(problem: FEMProblem, pattern: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve one CEM forward problem.

    Parameters
    ----------
    pattern : (L,) array
        Total current injected per electrode; must sum to zero and be nonzero.

    Returns
    -------
    (u, U) : interior nodal potentials and the L electrode voltages.  The
        electrode voltages are grounded to sum to zero.
    """
    pattern = np.asarray(pattern, dtype=float)
    L = problem.domain.electrode_count
    if pattern.shape != (L,):
        raise ForwardModelError(f"pattern must have length {L}")
    if np.all(pattern == 0):
        raise ForwardModelError("all-zero current pattern")
    if abs(pattern.sum()) > 1e-10 * np.abs(pattern).max():
        raise ForwardModelError("current pattern must sum to zero")
    lu = problem._factorize()
    n = problem.mesh.node_count
    rhs = np.zeros(n + L + 1)
    rhs[n : n + L] = pattern
    sol = lu.solve(rhs)
    u, U = sol[:n], sol[n : n + L]
    U = U - U.mean()  # grounding convention, guards against roundoff drift
    return u, U


def fem_solve_many(problem: FEMProblem, patterns: np.ndarray) -> np.ndarray:
    """Electrode voltages for each column of ``patterns``; one factorization."""
    lu = problem._factorize()
    L = problem.domain.electrode_count
    n = problem.mesh.node_count
    N = patterns.shape[1]
    rhs = np.zeros((n + L + 1, N))
    rhs[n : n + L, :] = patterns
    sol = lu.solve(rhs)
    U = sol[n : n + L, :]
    return U - U.mean(axis=0, keepdims=True)
