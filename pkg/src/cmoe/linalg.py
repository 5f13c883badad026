"""Small dense linear algebra used by the trainers.

Only two things are needed: solving small square systems (normal
equations) and the diagonal of a weighted hat matrix. Both operate on
plain float64 ndarrays; inputs are validated for shape and finiteness.
"""

import numpy as np
import scipy.linalg

from .errors import ShapeMismatch, SingularMatrix

PIVOT_TOL = 1e-12


def as_matrix(a, name="matrix"):
    """Coerce to a 2-D float64 array and require finite entries."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def as_weight_vector(w, n=None, name="weights"):
    """Coerce to a 1-D nonnegative finite float64 array of length n."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise ShapeMismatch(f"{name} must be 1-D, got shape {w.shape}")
    if n is not None and w.shape[0] != n:
        raise ShapeMismatch(f"{name} has length {w.shape[0]}, expected {n}")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(w < 0):
        raise ValueError(f"{name} contains negative entries")
    return w


def lu_solve(A, B):
    """Solve A @ X = B for square A by LU factorization with partial pivoting.

    Raises SingularMatrix when any pivot magnitude falls below PIVOT_TOL,
    which flags genuinely degenerate active sets rather than relying on
    downstream overflow.
    """
    A = as_matrix(A, "A")
    B = np.asarray(B, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"A must be square, got shape {A.shape}")
    squeeze = B.ndim == 1
    if squeeze:
        B = B[:, None]
    B = as_matrix(B, "B")
    if B.shape[0] != A.shape[0]:
        raise ShapeMismatch(
            f"B has {B.shape[0]} rows, expected {A.shape[0]}"
        )
    lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if pivots.min(initial=np.inf) < PIVOT_TOL:
        raise SingularMatrix(
            f"pivot magnitude {pivots.min():.3e} below {PIVOT_TOL:.0e}"
        )
    X = scipy.linalg.lu_solve((lu, piv), B, check_finite=False)
    return X[:, 0] if squeeze else X


def hat_diagonal(Xs, w):
    """Diagonal of H = Xs (Xs' W Xs)^-1 Xs' W for W = diag(w).

    h_i = x_i' (Xs' W Xs)^-1 x_i * w_i. Computed by solving the k x k
    Gram system against the identity (k right-hand sides); the full
    N x N hat matrix is never formed.
    """
    Xs = as_matrix(Xs, "Xs")
    n, k = Xs.shape
    if k < 1:
        raise ShapeMismatch("active-set matrix needs at least one column")
    if n < k:
        raise ShapeMismatch(f"need N >= k, got N={n}, k={k}")
    w = as_weight_vector(w, n)
    gram = Xs.T @ (w[:, None] * Xs)
    gram_inv = lu_solve(gram, np.eye(k))
    h = np.einsum("ij,jk,ik->i", Xs, gram_inv, Xs) * w
    return h
