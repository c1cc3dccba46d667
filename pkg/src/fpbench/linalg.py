"""Small dense kernels backing the extrapolation step.

Everything here operates on 64-bit numpy arrays.  The window sizes involved
are tiny (n <= O(10)), so the bordered solve uses a plain Gaussian
elimination with partial pivoting; the pivot floor doubles as the
singularity detector for the degenerate lambda=0 path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, SingularSystemError

__all__ = [
    "AndersonStepSolution",
    "as_matrix",
    "as_vector",
    "matvec",
    "gram",
    "solve_bordered",
    "axpy",
    "norm2",
    "lin_comb",
]

# Pivot is declared singular below this fraction of the largest entry.
PIVOT_FLOOR = 1e-14


@dataclass(frozen=True)
class AndersonStepSolution:
    """Lagrange multiplier and mixing coefficients of one extrapolation step.

    ``alpha`` sums to one (the equality constraint) up to solver roundoff.
    """

    nu: float
    alpha: np.ndarray


def as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"expected a 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("vector contains non-finite entries")
    return arr


def as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InputError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError("matrix contains non-finite entries")
    return arr


def matvec(a, v) -> np.ndarray:
    """Dense matrix-vector product ``A @ v``."""
    a = as_matrix(a)
    v = as_vector(v)
    if a.shape[1] != v.shape[0]:
        raise InputError(f"matvec shape mismatch: {a.shape} vs {v.shape}")
    return a @ v


def gram(g, lam: float) -> np.ndarray:
    """Regularized Gram matrix ``G^T G + lam * I``."""
    g = as_matrix(g)
    if lam < 0:
        raise InputError(f"lambda must be nonnegative, got {lam}")
    h = g.T @ g
    # Symmetrize exactly: mirrored entries must match bit-for-bit.
    h = 0.5 * (h + h.T)
    h[np.diag_indices_from(h)] += lam
    return h


def _solve_pp(a: np.ndarray, b: np.ndarray, step=None) -> np.ndarray:
    """Gaussian elimination with partial pivoting on a copy of (a, b)."""
    a = a.copy()
    b = b.copy()
    n = a.shape[0]
    floor = PIVOT_FLOOR * max(np.abs(a).max(), 1.0)
    for col in range(n):
        pivot_row = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[pivot_row, col]) < floor:
            raise SingularSystemError(step=step)
        if pivot_row != col:
            a[[col, pivot_row]] = a[[pivot_row, col]]
            b[[col, pivot_row]] = b[[pivot_row, col]]
        factors = a[col + 1:, col] / a[col, col]
        a[col + 1:, col:] -= np.outer(factors, a[col, col:])
        b[col + 1:] -= factors * b[col]
    x = np.empty(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1:] @ x[row + 1:]) / a[row, row]
    return x


def solve_bordered(h, step=None) -> AndersonStepSolution:
    """Solve the constrained least-squares system of one extrapolation step.

    The bordered system is ``[[0, 1^T], [1, H]] @ [nu; alpha] = [1; 0]``,
    which enforces ``sum(alpha) = 1`` while minimizing ``alpha^T H alpha``.

    Parameters
    ----------
    h : (n, n) symmetric matrix, typically ``gram(G, lam)``.
    step : optional iteration index, attached to the singularity error.
    """
    h = as_matrix(h)
    n = h.shape[0]
    if n != h.shape[1] or n < 1:
        raise InputError(f"H must be square and nonempty, got shape {h.shape}")
    if not np.allclose(h, h.T, rtol=0.0, atol=1e-12 * max(np.abs(h).max(), 1.0)):
        raise InputError("H must be symmetric")
    bordered = np.zeros((n + 1, n + 1))
    bordered[0, 1:] = 1.0
    bordered[1:, 0] = 1.0
    bordered[1:, 1:] = h
    rhs = np.zeros(n + 1)
    rhs[0] = 1.0
    y = _solve_pp(bordered, rhs, step=step)
    return AndersonStepSolution(nu=float(y[0]), alpha=y[1:])


def axpy(a: float, x, y) -> np.ndarray:
    """``a * x + y`` for equal-length vectors."""
    x = as_vector(x)
    y = as_vector(y)
    if x.shape != y.shape:
        raise InputError(f"axpy length mismatch: {x.shape} vs {y.shape}")
    return a * x + y


def norm2(v) -> float:
    """Euclidean norm."""
    return float(np.linalg.norm(as_vector(v)))


def lin_comb(coeffs, columns) -> np.ndarray:
    """``sum_i coeffs[i] * columns[i]`` over equal-length vectors."""
    coeffs = as_vector(coeffs)
    cols = [as_vector(c) for c in columns]
    if len(cols) != coeffs.shape[0]:
        raise InputError(
            f"{coeffs.shape[0]} coefficients for {len(cols)} columns"
        )
    if any(c.shape != cols[0].shape for c in cols):
        raise InputError("columns have mismatched lengths")
    out = np.zeros_like(cols[0])
    for c, col in zip(coeffs, cols):
        out += c * col
    return out
