"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the transformer stack needs are provided. RMS
normalization, softmax and cross-entropy are fused ops with hand-written
backward rules; everything else is elementwise or linear. Gradients are
accumulated into ``Var.grad`` by :func:`backward`.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "backward",
    "matmul",
    "rms_norm",
    "softmax",
    "silu",
    "reshape",
    "transpose",
    "repeat",
    "rope",
    "embedding",
    "cross_entropy",
]


class Var:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("value", "grad", "parents", "name")

    def __init__(self, value, parents=(), name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        # each parent is (Var, fn mapping upstream grad -> grad for that parent)
        self.parents = parents
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.shape}, name={self.name!r})"


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, value, grad_a, grad_b) -> Var:
    parents = []
    if isinstance(a, Var):
        parents.append((a, lambda g: _unbroadcast(grad_a(g), a.shape)))
    if isinstance(b, Var):
        parents.append((b, lambda g: _unbroadcast(grad_b(g), b.shape)))
    return Var(value, tuple(parents))


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def add(a, b) -> Var:
    return _binary(a, b, _val(a) + _val(b), lambda g: g, lambda g: g)


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av @ bv,
        lambda g: g @ np.swapaxes(bv, -1, -2),
        lambda g: np.swapaxes(av, -1, -2) @ g,
    )


def reshape(a: Var, shape) -> Var:
    return Var(a.value.reshape(shape), ((a, lambda g: g.reshape(a.shape)),))


def transpose(a: Var, axes) -> Var:
    inverse = np.argsort(axes)
    return Var(a.value.transpose(axes), ((a, lambda g: g.transpose(inverse)),))


def repeat(a: Var, times: int, axis: int) -> Var:
    """``np.repeat`` along ``axis``; the backward pass sums each group of copies."""
    if times == 1:
        return a
    ax = axis % a.value.ndim

    def back(g):
        shape = g.shape[:ax] + (a.shape[ax], times) + g.shape[ax + 1:]
        return g.reshape(shape).sum(axis=ax + 1)

    return Var(np.repeat(a.value, times, axis=ax), ((a, back),))


def rms_norm(x: Var, alpha: Var | None = None, eps: float = 0.0) -> Var:
    """RMS normalization over the last axis with optional broadcastable gain."""
    xv = x.value
    ms = np.mean(xv * xv, axis=-1, keepdims=True) + eps
    live = ms > 0
    r = np.where(live, 1.0 / np.sqrt(np.where(live, ms, 1.0)), 0.0)
    xhat = xv * r
    av = 1.0 if alpha is None else alpha.value
    d = xv.shape[-1]

    def back_x(g):
        u = g * av
        return r * u - xv * r**3 * np.sum(u * xv, axis=-1, keepdims=True) / d

    parents = [(x, back_x)]
    if alpha is not None:
        parents.append((alpha, lambda g: _unbroadcast(g * xhat, alpha.shape)))
    return Var(xhat * av, tuple(parents))


def softmax(scores: Var, causal: bool = False) -> Var:
    """Softmax over the last axis; ``causal`` masks keys after each query."""
    z = scores.value
    if causal:
        s_q, s_k = z.shape[-2:]
        mask = np.tril(np.ones((s_q, s_k), dtype=bool), k=s_k - s_q)
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)

    def back(g):
        return p * (g - np.sum(g * p, axis=-1, keepdims=True))

    return Var(p, ((scores, back),))


def silu(x: Var) -> Var:
    sig = 1.0 / (1.0 + np.exp(-x.value))
    return Var(x.value * sig, ((x, lambda g: g * sig * (1.0 + x.value * (1.0 - sig))),))


def rope(x: Var, theta: float) -> Var:
    """Rotary encoding of consecutive pairs along the last axis, positions on axis -2."""
    s, dk = x.shape[-2:]
    if dk % 2:
        raise ValueError("rotary encoding needs an even head dimension")
    inv_freq = theta ** (-np.arange(0, dk, 2, dtype=np.float64) / dk)
    ang = np.arange(s, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)

    def rotate(v, sgn):
        out = np.empty_like(v)
        a, b = v[..., 0::2], v[..., 1::2]
        out[..., 0::2] = a * cos - sgn * b * sin
        out[..., 1::2] = sgn * a * sin + b * cos
        return out

    # rotation is orthogonal, so the adjoint rotates by the opposite angle
    return Var(rotate(x.value, 1.0), ((x, lambda g: rotate(g, -1.0)),))


def embedding(table: Var, ids: np.ndarray) -> Var:
    ids = np.asarray(ids)

    def back(g):
        out = np.zeros_like(table.value)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return out

    return Var(table.value[ids], ((table, back),))


def cross_entropy(logits: Var, targets: np.ndarray) -> Var:
    """Mean next-token cross-entropy; ``logits`` is (..., vocab)."""
    z = logits.value
    t = np.asarray(targets).reshape(-1)
    flat = z.reshape(-1, z.shape[-1])
    m = flat.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=1))
    n = flat.shape[0]
    loss = float(np.mean(lse - flat[np.arange(n), t]))

    def back(g):
        p = np.exp(flat - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return (g * p / n).reshape(z.shape)

    return Var(np.array(loss), ((logits, back),))


def backward(out: Var) -> None:
    """Accumulate d(out)/d(node) into ``grad`` for every ancestor of scalar ``out``."""
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    grads = {id(out): np.ones_like(out.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, fn in node.parents:
            pg = fn(g)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
