"""Batched matrix-free Krylov solver for complex and real-linear systems.

The Lippmann-Schwinger and D-bar integral equations are solved here.  Both
are treated as linear systems on R^{2n} (real/imaginary split): the D-bar
operator involves complex conjugation and is only real-linear, so all inner
products are the real part of the complex dot product.

``bicgstab_batch`` runs stabilized bi-conjugate gradients on a whole batch of
independent systems at once (one matvec application serves every system in
the batch), verifies the true residual by an independent operator
application, and falls back to per-system LGMRES for stragglers.  Any solver
meeting the residual contract would be conforming; this one is chosen for its
low memory footprint and matvec-only requirements.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse.linalg import LinearOperator, lgmres


class SolverError(RuntimeError):
    """Krylov solve failed to reach the residual contract."""


def _rdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Real inner product per batch row: Re <a, b> on C^n ~ R^2n."""
    return np.einsum("ij,ij->i", a.conj(), b).real


def bicgstab_batch(
    matvec,
    b: np.ndarray,
    x0: np.ndarray | None = None,
    tol: float = 1e-6,
    maxiter: int = 500,
):
    """Solve A x = b for a batch of systems sharing one batched matvec.

    Parameters
    ----------
    matvec : callable
        Maps a (B, n) complex array to A applied per row (may be real-linear).
    b : (B, n) complex array
    x0 : optional initial guess, defaults to b.

    Returns
    -------
    x : (B, n) complex array
    residuals : (B,) true relative residuals (verified by a final matvec)
    iterations : (B,) iteration counts
    """
    b = np.asarray(b, dtype=complex)
    B, n = b.shape
    bnorm = np.sqrt(_rdot(b, b))
    trivial = bnorm == 0.0
    safe_bnorm = np.where(trivial, 1.0, bnorm)

    x = b.copy() if x0 is None else np.asarray(x0, dtype=complex).copy()
    x[trivial] = 0.0
    r = b - matvec(x)
    rhat = r.copy()
    rho = np.ones(B)
    alpha = np.ones(B)
    omega = np.ones(B)
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    iterations = np.zeros(B, dtype=int)
    active = np.sqrt(_rdot(r, r)) / safe_bnorm > tol
    active &= ~trivial
    broken = np.zeros(B, dtype=bool)

    eps = np.finfo(float).eps
    for it in range(maxiter):
        if not active.any():
            break
        rho_new = _rdot(rhat, r)
        breakdown = active & (np.abs(rho_new) < eps * 100 * safe_bnorm**2)
        broken |= breakdown
        active &= ~breakdown
        beta = np.where(active, rho_new / np.where(rho == 0, 1, rho) * alpha / np.where(omega == 0, 1, omega), 0.0)
        p = np.where(active[:, None], r + beta[:, None] * (p - omega[:, None] * v), p)
        v = np.where(active[:, None], matvec(p), v)
        denom = _rdot(rhat, v)
        breakdown = active & (np.abs(denom) < eps * 100 * safe_bnorm**2)
        broken |= breakdown
        active &= ~breakdown
        alpha = np.where(active, rho_new / np.where(denom == 0, 1, denom), 0.0)
        s = r - alpha[:, None] * v
        snorm = np.sqrt(_rdot(s, s)) / safe_bnorm
        early = active & (snorm <= 0.2 * tol)
        x = np.where(early[:, None], x + alpha[:, None] * p, x)
        active &= ~early
        t = np.where(active[:, None], matvec(s), 0.0)
        tt = _rdot(t, t)
        breakdown = active & (tt < eps**2 * 100)
        broken |= breakdown
        active &= ~breakdown
        omega = np.where(active, _rdot(t, s) / np.where(tt == 0, 1, tt), 0.0)
        upd = alpha[:, None] * p + omega[:, None] * s
        x = np.where(active[:, None], x + upd, x)
        r = np.where(active[:, None], s - omega[:, None] * t, r)
        iterations += active
        rnorm = np.sqrt(_rdot(r, r)) / safe_bnorm
        active &= rnorm > tol
        rho = np.where(rho_new == 0, 1, rho_new)

    # independent verification; polish stragglers one by one
    res = b - matvec(x)
    rel = np.sqrt(_rdot(res, res)) / safe_bnorm
    bad = np.where((rel > tol) & ~trivial)[0]
    for idx in bad:
        x[idx], rel[idx] = _fallback_single(matvec, b, x, idx, tol, maxiter)
    return x, rel, iterations


def _fallback_single(matvec, b, x, idx, tol, maxiter):
    """LGMRES on the real/imaginary split of one straggler system."""
    B, n = b.shape

    def single_apply(xc: np.ndarray) -> np.ndarray:
        buf = np.zeros((B, n), dtype=complex)
        buf[idx] = xc
        return matvec(buf)[idx]

    def split_apply(v: np.ndarray) -> np.ndarray:
        xc = v[:n] + 1j * v[n:]
        out = single_apply(xc)
        return np.concatenate([out.real, out.imag])

    op = LinearOperator((2 * n, 2 * n), matvec=split_apply, dtype=float)
    rhs = np.concatenate([b[idx].real, b[idx].imag])
    v0 = np.concatenate([x[idx].real, x[idx].imag])
    sol, _ = lgmres(op, rhs, x0=v0, rtol=tol * 0.1, atol=0.0, maxiter=maxiter)
    xc = sol[:n] + 1j * sol[n:]
    res = b[idx] - single_apply(xc)
    bnorm = np.linalg.norm(b[idx])
    rel = np.linalg.norm(res) / (bnorm if bnorm > 0 else 1.0)
    return xc, rel


def solve_batched(matvec, b, x0=None, tol=1e-6, maxiter=500, what="system"):
    """bicgstab_batch wrapper raising when any system misses the contract."""
    x, rel, iters = bicgstab_batch(matvec, b, x0=x0, tol=tol, maxiter=maxiter)
    if np.any(rel > tol):
        worst = float(rel.max())
        raise SolverError(f"{what}: {int((rel > tol).sum())} of {len(rel)} solves "
                          f"missed tol {tol} (worst residual {worst:.3e})")
    return x, rel, iters
