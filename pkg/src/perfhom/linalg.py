"""Preconditioned conjugate gradients for the SPD Newton systems."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# above this many unknowns "auto" switches from Jacobi to an AMG V-cycle
AMG_THRESHOLD = 60_000


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float
    history: list = field(default_factory=list)
    breakdown: bool = False


def make_preconditioner(A: sp.spmatrix, kind: str = "auto"):
    """Return a callable r -> M^{-1} r and the name of the choice made."""
    if kind == "auto":
        kind = "amg" if A.shape[0] > AMG_THRESHOLD else "jacobi"
    if kind == "jacobi":
        d = A.diagonal()
        if np.any(d <= 0):
            return None, "jacobi"
        inv = 1.0 / d
        return (lambda r: inv * r), "jacobi"
    if kind == "amg":
        import pyamg
        # pyamg draws spectral-radius start vectors from the global RNG
        state = np.random.get_state()
        np.random.seed(0)
        try:
            ml = pyamg.smoothed_aggregation_solver(A.tocsr(), max_coarse=500)
        finally:
            np.random.set_state(state)
        M = ml.aspreconditioner(cycle="V")
        return M.matvec, "amg"
    if kind == "none":
        return (lambda r: r), "none"
    raise ValueError(f"unknown preconditioner {kind!r}")


def pcg(A, b: np.ndarray, precond=None, x0=None, rtol: float = 1e-10,
        maxiter: int | None = None) -> CGResult:
    """Solve A x = b for symmetric positive definite A.

    Stops when ||r|| <= rtol * ||b||.  Non-positive curvature is reported
    as a breakdown so the caller can regularize and retry.
    """
    n = b.shape[0]
    maxiter = maxiter or max(200, 10 * int(np.sqrt(n)) + 200)
    x = np.zeros(n) if x0 is None else x0.copy()
    r = b - A @ x if x0 is not None else b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return CGResult(np.zeros(n), True, 0, 0.0, [0.0])
    target = rtol * bnorm
    z = precond(r) if precond else r
    d = z.copy()
    rz = r @ z
    hist = [np.linalg.norm(r) / bnorm]
    for k in range(1, maxiter + 1):
        Ad = A @ d
        curv = d @ Ad
        if curv <= 0 or not np.isfinite(curv):
            return CGResult(x, False, k, hist[-1], hist, breakdown=True)
        alpha = rz / curv
        x += alpha * d
        r -= alpha * Ad
        rn = np.linalg.norm(r)
        hist.append(rn / bnorm)
        if rn <= target:
            return CGResult(x, True, k, hist[-1], hist)
        z = precond(r) if precond else r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    return CGResult(x, False, maxiter, hist[-1], hist)
