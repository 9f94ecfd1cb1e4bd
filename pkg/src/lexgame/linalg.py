"""Dense linear-algebra services: SVD pseudoinverse solves, numerical rank,
null-space bases, and column-space inclusion tests.

SVD is the single factorization primitive.  Matrices are plain numpy
arrays; desk-scale dimensions make dense storage the right call.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg


class NumericError(Exception):
    """Non-finite input or a failed factorization."""


def _check_finite(A):
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NumericError("non-finite entries")
    return A


def default_rank_tol(A: np.ndarray) -> float:
    return max(A.shape) * np.finfo(float).eps


def pinv_solve(A, b, rank_tol: float | None = None) -> np.ndarray:
    """Minimum-norm least-squares solution A+ b via SVD.

    Singular values at or below rank_tol * sigma_max are treated as zero.
    If b lies in Col(A) the result solves A x = b; otherwise it is the
    least-squares minimizer of smallest norm.
    """
    A = _check_finite(A)
    b = _check_finite(b)
    if rank_tol is None:
        rank_tol = default_rank_tol(A)
    x, _, _, _ = scipy.linalg.lstsq(A, b, cond=rank_tol, lapack_driver="gelsd")
    return x


def svdvals(A) -> np.ndarray:
    A = _check_finite(A)
    if min(A.shape) == 0:
        return np.zeros(0)
    return scipy.linalg.svdvals(A)


def numerical_rank(A, rank_tol: float | None = None) -> int:
    """Count of singular values above rank_tol * sigma_max."""
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return 0
    if rank_tol is None:
        rank_tol = default_rank_tol(A)
    s = svdvals(A)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rank_tol * s[0]))


def null_space_basis(A, rank_tol: float | None = None) -> np.ndarray:
    """Orthonormal basis of the null space of A, as columns."""
    A = np.asarray(A, dtype=float)
    n = A.shape[1] if A.ndim == 2 else len(A)
    if A.size == 0:
        return np.eye(n)
    A = _check_finite(A)
    if rank_tol is None:
        rank_tol = default_rank_tol(A)
    _, s, vt = scipy.linalg.svd(A, full_matrices=True)
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > rank_tol * smax)) if smax > 0 else 0
    return vt[rank:].T.copy()


def col_space_contains(B, A, tol: float = 1e-8, rank_tol: float | None = None) -> bool:
    """True iff every column a of A satisfies ||(I - B B+) a|| <= tol (1 + ||a||)."""
    B = _check_finite(B)
    A = _check_finite(np.atleast_2d(A))
    if B.shape[0] != A.shape[0]:
        raise ValueError("row count mismatch")
    if A.shape[1] == 0:
        return True
    X = pinv_solve(B, A, rank_tol)
    resid = B @ X - A
    for j in range(A.shape[1]):
        a = A[:, j]
        if np.linalg.norm(resid[:, j]) > tol * (1.0 + np.linalg.norm(a)):
            return False
    return True
