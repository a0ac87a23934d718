"""Matrix calculus in row-wise vectorization with numerator-layout Jacobians.

``vec_r`` stacks the rows of a matrix. A Jacobian of ``Y = f(X)`` is the
matrix whose ``(i, j)`` entry is ``d vec_r(Y)_i / d vec_r(X)_j``. Under this
convention ``vec_r(A W B) = (A kron B^T) vec_r(W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import as_matrix, rms_norm

__all__ = [
    "MAX_JACOBIAN_AXIS",
    "Jacobian",
    "BlockDiagonal",
    "vec_r",
    "unvec_r",
    "kron",
    "commutation_matrix",
    "softmax_jacobian",
    "rmsnorm_jacobian",
    "rownorm_jacobian",
    "linear_map_jacobian",
    "finite_diff_jacobian",
]

# dense Jacobians are only meant for desk-scale verification
MAX_JACOBIAN_AXIS = 4096


def _check_cap(rows: int, cols: int) -> None:
    if rows > MAX_JACOBIAN_AXIS or cols > MAX_JACOBIAN_AXIS:
        raise ValueError(
            f"dense Jacobian of shape {rows}x{cols} exceeds the cap of "
            f"{MAX_JACOBIAN_AXIS} per axis"
        )


@dataclass(frozen=True)
class Jacobian:
    """Dense numerator-layout Jacobian of an ``out_shape`` map of an ``in_shape`` matrix."""

    out_rows: int
    out_cols: int
    in_rows: int
    in_cols: int
    matrix: np.ndarray

    def __post_init__(self):
        expected = (self.out_rows * self.out_cols, self.in_rows * self.in_cols)
        if self.matrix.shape != expected:
            raise ValueError(f"Jacobian matrix has shape {self.matrix.shape}, expected {expected}")

    @classmethod
    def from_dense(cls, matrix, out_shape: tuple[int, int], in_shape: tuple[int, int]) -> "Jacobian":
        return cls(out_shape[0], out_shape[1], in_shape[0], in_shape[1],
                   np.asarray(matrix, dtype=np.float64))

    @property
    def out_shape(self) -> tuple[int, int]:
        return (self.out_rows, self.out_cols)

    @property
    def in_shape(self) -> tuple[int, int]:
        return (self.in_rows, self.in_cols)

    def dense(self) -> np.ndarray:
        return self.matrix


class BlockDiagonal:
    """Block-diagonal Jacobian that stores only its square diagonal blocks."""

    def __init__(self, blocks: Sequence[np.ndarray], out_shape, in_shape):
        self.blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
        self.out_shape = tuple(out_shape)
        self.in_shape = tuple(in_shape)

    def dense(self) -> np.ndarray:
        n = sum(b.shape[0] for b in self.blocks)
        m = sum(b.shape[1] for b in self.blocks)
        _check_cap(n, m)
        out = np.zeros((n, m))
        r = c = 0
        for b in self.blocks:
            out[r:r + b.shape[0], c:c + b.shape[1]] = b
            r += b.shape[0]
            c += b.shape[1]
        return out

    def jacobian(self) -> Jacobian:
        return Jacobian.from_dense(self.dense(), self.out_shape, self.in_shape)

    @property
    def matrix(self) -> np.ndarray:
        return self.dense()


def vec_r(m) -> np.ndarray:
    """Concatenate the rows of ``m``."""
    return np.asarray(m, dtype=np.float64).reshape(-1).copy()


def unvec_r(v, shape: tuple[int, int]) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(shape).copy()


def kron(a, b) -> np.ndarray:
    """Kronecker product; block ``(i, j)`` is ``a[i, j] * b``."""
    a = as_matrix(a)
    b = as_matrix(b)
    _check_cap(a.shape[0] * b.shape[0], a.shape[1] * b.shape[1])
    return np.kron(a, b)


def commutation_matrix(m: int, n: int) -> np.ndarray:
    """Permutation ``K`` with ``K @ vec_r(W) == vec_r(W.T)`` for every ``m x n`` matrix ``W``."""
    if m < 1 or n < 1:
        raise ValueError("commutation matrix dimensions must be positive")
    _check_cap(m * n, m * n)
    k = np.zeros((m * n, m * n))
    for i in range(m):
        for j in range(n):
            # W[i, j] sits at i*n + j in vec_r(W) and at j*m + i in vec_r(W^T)
            k[j * m + i, i * n + j] = 1.0
    return k


def _softmax_row_block(p: np.ndarray) -> np.ndarray:
    return np.diag(p) - np.outer(p, p)


def softmax_jacobian(a, tol: float = 1e-9) -> BlockDiagonal:
    """Jacobian of the row-wise softmax, evaluated at its output ``a``.

    Block ``i`` is ``diag(a_i) - a_i a_i^T``.
    """
    a = as_matrix(a)
    sums = a.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size or np.any(a < -tol):
        raise ValueError(
            f"softmax_jacobian expects a row-stochastic matrix; rows {bad.tolist()} "
            "do not sum to 1"
        )
    s, n = a.shape
    return BlockDiagonal([_softmax_row_block(row) for row in a], (s, n), (s, n))


def rmsnorm_jacobian(x) -> np.ndarray:
    """``(sqrt(d)/|x|) (I - x x^T / |x|^2)``: derivative of unit-gain RMS norm at ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    nrm = np.linalg.norm(x)
    if nrm == 0.0:
        raise ValueError("RMS normalization is not differentiable at the zero vector")
    return (np.sqrt(d) / nrm) * (np.eye(d) - np.outer(x, x) / nrm**2)


def rownorm_jacobian(x) -> BlockDiagonal:
    """Block-diagonal Jacobian of row-wise RMS normalization of ``x``."""
    x = as_matrix(x)
    blocks = []
    for i, row in enumerate(x):
        if not np.any(row):
            raise ValueError(f"row {i} is zero; normalization Jacobian undefined")
        blocks.append(rmsnorm_jacobian(row))
    return BlockDiagonal(blocks, x.shape, x.shape)


def linear_map_jacobian(a, b) -> Jacobian:
    """Jacobian ``A kron B^T`` of ``W -> A W B`` for ``A`` (m x n) and ``B`` (p x q)."""
    a = as_matrix(a)
    b = as_matrix(b)
    return Jacobian.from_dense(kron(a, b.T), (a.shape[0], b.shape[1]), (a.shape[1], b.shape[0]))


def finite_diff_jacobian(
    f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-5
) -> Jacobian:
    """Central-difference Jacobian of a matrix-to-matrix map, in ``vec_r`` layout."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = as_matrix(x)
    y0 = np.atleast_2d(np.asarray(f(x.copy()), dtype=np.float64))
    _check_cap(y0.size, x.size)
    cols = []
    for idx in range(x.size):
        i, j = divmod(idx, x.shape[1])
        xp = x.copy()
        xm = x.copy()
        xp[i, j] += h
        xm[i, j] -= h
        fp = np.asarray(f(xp), dtype=np.float64)
        fm = np.asarray(f(xm), dtype=np.float64)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(f"non-finite output when perturbing entry ({i}, {j})")
        cols.append((fp - fm).reshape(-1) / (2.0 * h))
    return Jacobian.from_dense(np.stack(cols, axis=1), y0.shape, x.shape)


def rownorm(x) -> np.ndarray:
    """Row-wise unit-gain RMS normalization (``eps = 0``)."""
    return rms_norm(x)
