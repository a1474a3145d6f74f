"""Cholesky factorization of symmetric block-tridiagonal matrices.

The matrix is given by its diagonal blocks ``diag[t]`` (T, n, n) and the
sub-diagonal blocks ``lower[t] = H[t+1, t]`` (T-1, n, n).  Factoring costs
O(T n^3) instead of O((T n)^3) for a dense solve.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from .errors import SingularSystem


class BlockTridiagCholesky:
    def __init__(self, diag, lower):
        diag = np.asarray(diag, dtype=float)
        lower = np.asarray(lower, dtype=float)
        T = diag.shape[0]
        if lower.shape[0] != max(T - 1, 0):
            raise ValueError("need T-1 sub-diagonal blocks")
        self.T, self.n = T, diag.shape[1]
        self.L = np.empty_like(diag)
        self.W = np.empty_like(lower)
        try:
            self.L[0] = cholesky(diag[0], lower=True, check_finite=False)
            for t in range(1, T):
                # W_t = lower[t-1] L_{t-1}^{-T}
                W = solve_triangular(self.L[t - 1], lower[t - 1].T, lower=True, check_finite=False).T
                self.W[t - 1] = W
                self.L[t] = cholesky(diag[t] - W @ W.T, lower=True, check_finite=False)
        except LinAlgError as exc:
            raise SingularSystem(f"block-tridiagonal matrix is not positive definite ({exc})") from None

    def invert_blocks(self) -> "BlockTridiagCholesky":
        """Store ``L_t^-1`` so later solves are matrix-vector products only.

        Worth it when one factor serves many right-hand sides.
        """
        eye = np.eye(self.n)
        self.Li = np.array([solve_triangular(L, eye, lower=True, check_finite=False) for L in self.L])
        self.LiT = np.ascontiguousarray(np.swapaxes(self.Li, 1, 2))
        self.WT = np.ascontiguousarray(np.swapaxes(self.W, 1, 2))
        return self

    def solve(self, b):
        """Solve ``H x = b`` for ``b`` shaped (T, n)."""
        b = np.asarray(b, dtype=float)
        if hasattr(self, "Li"):
            return self._solve_inverted(b)
        y = np.empty_like(b)
        L, W = self.L, self.W
        y[0] = solve_triangular(L[0], b[0], lower=True, check_finite=False)
        for t in range(1, self.T):
            y[t] = solve_triangular(L[t], b[t] - W[t - 1] @ y[t - 1], lower=True, check_finite=False)
        x = np.empty_like(b)
        x[-1] = solve_triangular(L[-1], y[-1], lower=True, trans="T", check_finite=False)
        for t in range(self.T - 2, -1, -1):
            x[t] = solve_triangular(L[t], y[t] - W[t].T @ x[t + 1], lower=True, trans="T", check_finite=False)
        return x

    def _solve_inverted(self, b):
        Li, LiT, W, WT = self.Li, self.LiT, self.W, self.WT
        y = np.empty_like(b)
        y[0] = Li[0] @ b[0]
        for t in range(1, self.T):
            y[t] = Li[t] @ (b[t] - W[t - 1] @ y[t - 1])
        x = np.empty_like(b)
        x[-1] = LiT[-1] @ y[-1]
        for t in range(self.T - 2, -1, -1):
            x[t] = LiT[t] @ (y[t] - WT[t] @ x[t + 1])
        return x

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diagonal(self.L, axis1=1, axis2=2))))


def to_dense(diag, lower):
    """Assemble the full symmetric matrix (for tests and small problems)."""
    diag = np.asarray(diag)
    T, n = diag.shape[:2]
    H = np.zeros((T * n, T * n))
    for t in range(T):
        H[t * n:(t + 1) * n, t * n:(t + 1) * n] = diag[t]
    for t in range(T - 1):
        H[(t + 1) * n:(t + 2) * n, t * n:(t + 1) * n] = lower[t]
        H[t * n:(t + 1) * n, (t + 1) * n:(t + 2) * n] = lower[t].T
    return H
