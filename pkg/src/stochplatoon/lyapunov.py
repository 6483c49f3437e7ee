"""Discrete-time Lyapunov (Stein) equation solvers.

Solves ``X = A X A^T + Q`` for a Schur-stable ``A``. The doubling iteration
is the production path; the Kronecker/vec solve is kept for small systems and
as an independent check.
"""

from __future__ import annotations

import numpy as np

from .errors import SlowConvergence

__all__ = ["solve_stein", "solve_stein_kron", "fixed_point_stein"]


def solve_stein(A: np.ndarray, Q: np.ndarray, tol: float = 1e-15, max_iter: int = 100) -> np.ndarray:
    """Smith doubling for ``X = A X A^T + Q``.

    After ``j`` sweeps the iterate equals the partial sum of ``A^k Q A^k^T``
    over ``k < 2**j``, so the cost is logarithmic in the decay horizon.
    """
    A = np.asarray(A, dtype=float)
    X = np.array(Q, dtype=float, copy=True)
    if X.size == 0:
        return X
    Ak = A.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            step = Ak @ X @ Ak.T
            X = X + step
            X = 0.5 * (X + X.T)
            if not np.all(np.isfinite(X)):
                break
            scale = max(np.abs(X).max(), np.finfo(float).tiny)
            if np.abs(step).max() <= tol * scale:
                return X
            Ak = Ak @ Ak
            if not np.all(np.isfinite(Ak)):
                break
    raise SlowConvergence("Smith doubling did not converge; is A Schur stable?")


def solve_stein_kron(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """``vec(X) = (I - A kron A)^{-1} vec(Q)`` with column-major ``vec``.

    Memory grows as ``n**4``; intended for ``n`` up to a few dozen.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    lhs = np.eye(n * n) - np.kron(A, A)
    vec_x = np.linalg.solve(lhs, np.asarray(Q, dtype=float).reshape(-1, order="F"))
    X = vec_x.reshape((n, n), order="F")
    return 0.5 * (X + X.T)


def fixed_point_stein(A: np.ndarray, Q: np.ndarray, tol: float = 1e-14, max_iter: int = 1_000_000) -> np.ndarray:
    """Plain iteration ``X <- A X A^T + Q`` from ``X = 0`` until the update stalls."""
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    X = np.zeros_like(Q)
    for _ in range(max_iter):
        X_new = A @ X @ A.T + Q
        X_new = 0.5 * (X_new + X_new.T)
        if np.abs(X_new - X).max() <= tol * max(1.0, np.abs(X_new).max()):
            return X_new
        X = X_new
    raise SlowConvergence("fixed-point iteration did not converge")
