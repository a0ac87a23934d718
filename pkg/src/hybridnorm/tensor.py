"""Dense float64 matrix core: validation, normalization, softmax, norms.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in row-major
layout. The helpers here never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NonFiniteError",
    "ConvergenceError",
    "NormParams",
    "as_matrix",
    "rms_norm",
    "layer_norm",
    "centering_matrix",
    "softmax_rows",
    "spectral_norm",
    "frobenius_norm",
    "min_singular_value",
]

DEFAULT_EPS = 1e-8


class NonFiniteError(ValueError):
    """Raised when a matrix that must be finite contains NaN or Inf."""


class ConvergenceError(ArithmeticError):
    """Raised when an iterative routine fails to reach its tolerance."""


def as_matrix(a, *, allow_nonfinite: bool = False) -> np.ndarray:
    """Return ``a`` as a 2-D float64 array, rejecting NaN/Inf by default."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not allow_nonfinite and not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix contains non-finite entries")
    return m


@dataclass(frozen=True)
class NormParams:
    """Gain vector and stabilizer of an RMS/Layer normalization."""

    alpha: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if alpha.ndim != 1 or alpha.size < 1:
            raise ValueError("alpha must be a non-empty vector")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def ones(cls, d: int, eps: float = DEFAULT_EPS) -> "NormParams":
        return cls(np.ones(d), eps)

    @property
    def dim(self) -> int:
        return self.alpha.size


def _unit_params(d: int, p: NormParams | None) -> NormParams:
    if p is None:
        return NormParams(np.ones(d), 0.0)
    if p.dim != d:
        raise ValueError(f"alpha has length {p.dim}, input has {d}")
    return p


def rms_norm(x, p: NormParams | None = None) -> np.ndarray:
    """RMS-normalize along the last axis: ``alpha * x / sqrt(mean(x**2) + eps)``.

    Works on vectors and on stacks of rows. ``p=None`` means unit gain and
    ``eps=0``. A zero row with ``eps=0`` maps to zero.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    p = _unit_params(d, p)
    # rescale by the row max first so tiny rows do not underflow when squared
    m = np.max(np.abs(x), axis=-1, keepdims=True)
    live = m > 0
    safe_m = np.where(live, m, 1.0)
    y = x / safe_m
    with np.errstate(over="ignore"):
        denom = np.sqrt(np.mean(y * y, axis=-1, keepdims=True) + p.eps / safe_m / safe_m)
    # 0/0 -> 0 so that diagnostics never abort on a dead row
    return np.divide(y, denom, out=np.zeros_like(y), where=live) * p.alpha


def centering_matrix(d: int) -> np.ndarray:
    """``I - (1/d) 1 1^T``, the projector that removes the row mean."""
    return np.eye(d) - np.full((d, d), 1.0 / d)


def layer_norm(x, p: NormParams | None = None) -> np.ndarray:
    """LayerNorm without bias, written as RMS normalization of the centered input."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least two features")
    return rms_norm(x - x.mean(axis=-1, keepdims=True), p)


def softmax_rows(m, causal: bool = False) -> np.ndarray:
    """Row-wise softmax with max subtraction; ``causal`` masks the strict upper triangle."""
    m = as_matrix(m)
    if causal:
        if m.shape[0] != m.shape[1]:
            raise ValueError("causal softmax needs a square score matrix")
        m = np.where(np.tril(np.ones(m.shape, dtype=bool)), m, -np.inf)
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def frobenius_norm(m) -> float:
    m = as_matrix(m)
    return float(np.sqrt(np.sum(m * m)))


def spectral_norm(m, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Largest singular value by power iteration on ``M^T M``.

    The start vector is fixed (all ones plus a deterministic ramp) so results
    are reproducible. Raises :class:`ConvergenceError` if the Rayleigh quotient
    has not settled to relative ``tol`` within ``max_iter`` steps.
    """
    m = as_matrix(m)
    n = m.shape[1]
    if not np.any(m):
        return 0.0
    gram = m.T @ m
    v = np.ones(n) + np.arange(n) / (3.0 * n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector hit the null space; restart on a different axis
            v = np.roll(v, 1) + 1.0 / n
            v /= np.linalg.norm(v)
            continue
        new_lam = float(v @ w)
        v = w / nw
        if abs(new_lam - lam) <= tol * abs(new_lam):
            return float(np.sqrt(max(float(v @ gram @ v), 0.0)))
        lam = new_lam
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations "
        "(nearly repeated top singular values?)"
    )


def min_singular_value(m) -> float:
    """Smallest of the ``min(rows, cols)`` singular values; 0 for rank-deficient input."""
    m = as_matrix(m)
    s = np.linalg.svd(m, compute_uv=False)
    smin = float(s[-1])
    scale = float(s[0]) if s[0] > 0 else 1.0
    if smin <= scale * max(m.shape) * np.finfo(np.float64).eps:
        return 0.0
    return smin
