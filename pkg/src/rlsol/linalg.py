"""Minimal dense linear-algebra substrate.

Matrices are 2-D float64 ``numpy`` arrays in row-major order, vectors are
1-D arrays. Every public operation validates finiteness so downstream
estimator code never has to re-check.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionError, FactorizationError, InputError

Matrix = np.ndarray
Vector = np.ndarray

_SYM_TOL = 1e-10


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Coerce to a 2-D float64 array and validate finiteness."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {out.shape}")
    if out.shape[0] < 1 or out.shape[1] < 1:
        raise DimensionError(f"{name} must have positive dimensions, got {out.shape}")
    if not np.isfinite(out).all():
        raise InputError(f"{name} contains non-finite entries")
    return out


def as_vector(a, name: str = "vector") -> Vector:
    """Coerce to a 1-D float64 array and validate finiteness."""
    out = np.asarray(a, dtype=np.float64).reshape(-1)
    if out.size < 1:
        raise DimensionError(f"{name} must be non-empty")
    if not np.isfinite(out).all():
        raise InputError(f"{name} contains non-finite entries")
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with an explicit shape check."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply shapes {a.shape} and {b.shape}: inner dimensions differ"
        )
    return a @ b


def transpose(a: Matrix) -> Matrix:
    return as_matrix(a).T.copy()


def frobenius_norm(a: Matrix) -> float:
    """Square root of the sum of squared entries."""
    return float(np.sqrt(np.sum(np.square(as_matrix(a)))))


def cholesky_lower(a: Matrix) -> Matrix:
    """Lower-triangular Cholesky factor of an SPD matrix.

    Raises FactorizationError naming the failing pivot when the matrix is
    not positive definite.
    """
    a = as_matrix(a, "spd matrix")
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix must be square, got {a.shape}")
    scale = 1.0 + np.abs(a).max()
    if np.abs(a - a.T).max() > _SYM_TOL * scale:
        raise InputError("matrix is not symmetric within tolerance")
    low = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - low[j, :j] @ low[j, :j]
        if pivot <= 0.0 or not np.isfinite(pivot):
            raise FactorizationError(j)
        low[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[j, j]
    return low


def spd_solve(a: Matrix, b: Matrix) -> Matrix:
    """Solve a @ X = b for symmetric positive-definite ``a``.

    Uses a Cholesky factorization, which doubles as a positive-definiteness
    check.
    """
    a = as_matrix(a, "spd matrix")
    b = as_matrix(b, "right-hand side")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(
            f"incompatible shapes for solve: {a.shape} and {b.shape}"
        )
    low = cholesky_lower(a)
    y = solve_triangular(low, b, lower=True)
    x = solve_triangular(low.T, y, lower=False)
    if not np.isfinite(x).all():
        raise InputError("solve produced non-finite entries")
    return x
