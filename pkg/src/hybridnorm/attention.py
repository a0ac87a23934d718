"""Attention with normalization variants, and analytic weight Jacobians.

The forward path covers every attention-internal placement (Vanilla, QK, KV,
QKV, QKC, KC, QKVC), rotary position encoding and grouped-query multi-head
attention. The Jacobian path is single-head, unmasked and uses unit-gain
RMS normalization with ``eps = 0``; it assembles the closed-form weight
derivatives of plain Pre-Norm attention, Pre-Norm + QK-Norm attention and
QKV-Norm attention from the primitives in :mod:`hybridnorm.vecjac`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NormParams, as_matrix, frobenius_norm, min_singular_value, rms_norm, softmax_rows, spectral_norm
from .vecjac import (
    Jacobian,
    commutation_matrix,
    kron,
    rownorm_jacobian,
    softmax_jacobian,
)

__all__ = [
    "AttnNormScheme",
    "AttentionWeights",
    "AttnJacobians",
    "BoundEntry",
    "BoundReport",
    "BOUND_VARIANTS",
    "attn_variant",
    "apply_rope",
    "mha",
    "prenorm_attention",
    "qkv_attention",
    "preqk_attention",
    "attn_jacobians_prenorm",
    "attn_jacobians_qkv",
    "attn_jacobians_qk",
    "gradient_bounds",
    "input_gain",
    "rope_tables",
]


class AttnNormScheme(str, enum.Enum):
    """Which of query, key, value and context get normalized inside attention."""

    VANILLA = "Vanilla"
    QK = "QK"
    KV = "KV"
    QKV = "QKV"
    QKC = "QKC"
    KC = "KC"
    QKVC = "QKVC"

    @property
    def norm_q(self) -> bool:
        return "Q" in self.value

    @property
    def norm_k(self) -> bool:
        return "K" in self.value

    @property
    def norm_v(self) -> bool:
        return "V" in self.value and self is not AttnNormScheme.VANILLA

    @property
    def norm_c(self) -> bool:
        return self.value.endswith("C")

    @classmethod
    def parse(cls, name: str) -> "AttnNormScheme":
        for member in cls:
            if member.value.lower() == name.lower() or member.name.lower() == name.lower():
                return member
        raise ValueError(f"unknown attention normalization scheme {name!r}")


def _norm(x: np.ndarray, p: NormParams | None) -> np.ndarray:
    return rms_norm(x, p)


def attn_variant(
    scheme: AttnNormScheme | str,
    q,
    k,
    v,
    causal: bool = False,
    q_norm: NormParams | None = None,
    k_norm: NormParams | None = None,
    v_norm: NormParams | None = None,
    c_norm: NormParams | None = None,
    return_probs: bool = False,
):
    """Scaled dot-product attention with the normalizations named by ``scheme``.

    Norm parameters default to unit gain with ``eps = 0``.
    """
    scheme = AttnNormScheme(scheme) if not isinstance(scheme, AttnNormScheme) else scheme
    q, k, v = as_matrix(q), as_matrix(k), as_matrix(v)
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"Q, K, V shapes differ: {q.shape}, {k.shape}, {v.shape}")
    dk = q.shape[1]
    if scheme.norm_q:
        q = _norm(q, q_norm)
    if scheme.norm_k:
        k = _norm(k, k_norm)
    if scheme.norm_v:
        v = _norm(v, v_norm)
    a = softmax_rows(q @ k.T / math.sqrt(dk), causal=causal)
    out = a @ v
    if scheme.norm_c:
        out = _norm(out, c_norm)
    return (out, a) if return_probs else out


def rope_tables(seq_len: int, dim: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Cosine and sine tables of shape ``(seq_len, dim // 2)``."""
    if dim % 2:
        raise ValueError("rotary encoding needs an even head dimension")
    inv_freq = theta ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rope(x, theta: float) -> np.ndarray:
    """Rotate consecutive feature pairs ``(2i, 2i+1)`` of ``x`` (..., s, d_k) by position."""
    x = np.asarray(x, dtype=np.float64)
    cos, sin = rope_tables(x.shape[-2], x.shape[-1], theta)
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


@dataclass
class AttentionWeights:
    """Projection weights of one attention block plus the per-path norm gains.

    ``wq`` is ``d x (h d_k)``; ``wk`` and ``wv`` are ``d x (g d_k)`` with ``g``
    key/value heads; ``wo`` is ``(h d_k) x d``. In the single-head Jacobian
    setting ``h = g = 1``. A gain vector may have length ``d_k`` (shared by all
    heads) or span the full projected width (one slice per head).
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    q_norm: NormParams | None = None
    k_norm: NormParams | None = None
    v_norm: NormParams | None = None
    c_norm: NormParams | None = None

    def __post_init__(self):
        self.wq, self.wk, self.wv, self.wo = (as_matrix(w) for w in (self.wq, self.wk, self.wv, self.wo))
        d = self.wq.shape[0]
        if self.wk.shape[0] != d or self.wv.shape[0] != d or self.wo.shape[1] != d:
            raise ValueError("projection weights disagree on the model dimension")
        if self.wk.shape != self.wv.shape:
            raise ValueError("W_K and W_V must have the same shape")
        if self.wo.shape[0] != self.wq.shape[1]:
            raise ValueError("W_O input width must match W_Q output width")

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def dk(self) -> int:
        """Projected width for the single-head setting."""
        return self.wq.shape[1]

    def scaled(self, **factors: float) -> "AttentionWeights":
        """Copy with e.g. ``wk=5.0`` multiplying ``W_K`` by five."""
        kw = {name: getattr(self, name) * factors.get(name, 1.0) for name in ("wq", "wk", "wv", "wo")}
        return AttentionWeights(**kw, q_norm=self.q_norm, k_norm=self.k_norm,
                                v_norm=self.v_norm, c_norm=self.c_norm)

    @classmethod
    def random(cls, d: int, dk: int, rng: np.random.Generator, scale: float = 1.0) -> "AttentionWeights":
        """Gaussian single-head weights with entries of std ``scale / sqrt(d)``."""
        std = scale / math.sqrt(d)
        return cls(
            rng.normal(0, std, (d, dk)),
            rng.normal(0, std, (d, dk)),
            rng.normal(0, std, (d, dk)),
            rng.normal(0, std, (dk, d)),
        )


def _head_gain(p: NormParams | None, head: int, dk: int) -> NormParams | None:
    if p is None or p.dim == dk:
        return p
    return NormParams(p.alpha[head * dk:(head + 1) * dk], p.eps)


def mha(
    scheme: AttnNormScheme | str,
    x,
    weights: AttentionWeights,
    heads: int,
    kv_heads: int | None = None,
    rope_theta: float | None = None,
    causal: bool = True,
    return_probs: bool = False,
):
    """Grouped-query multi-head attention ``Concat(head_1..head_h) W_O``.

    Per head: split, normalize over the head dimension as the scheme says,
    apply rotary encoding to Q and K (if ``rope_theta`` is given), attend,
    optionally normalize the context. Query head ``i`` reads key/value head
    ``i // (heads // kv_heads)``.
    """
    scheme = AttnNormScheme(scheme) if not isinstance(scheme, AttnNormScheme) else scheme
    x = as_matrix(x)
    kv_heads = heads if kv_heads is None else kv_heads
    s, d = x.shape
    if weights.d != d:
        raise ValueError(f"input width {d} does not match weights ({weights.d})")
    if weights.wq.shape[1] % heads:
        raise ValueError(f"projection width {weights.wq.shape[1]} not divisible by {heads} heads")
    if heads % kv_heads:
        raise ValueError(f"{heads} query heads not divisible by {kv_heads} key/value heads")
    dk = weights.wq.shape[1] // heads
    if weights.wk.shape[1] != kv_heads * dk:
        raise ValueError("W_K width must equal kv_heads * d_k")
    group = heads // kv_heads

    q = (x @ weights.wq).reshape(s, heads, dk).transpose(1, 0, 2)
    k = (x @ weights.wk).reshape(s, kv_heads, dk).transpose(1, 0, 2)
    v = (x @ weights.wv).reshape(s, kv_heads, dk).transpose(1, 0, 2)

    def norm_heads(t, p, n):
        if p is None or p.dim == dk:
            return rms_norm(t, p)
        return rms_norm(t, NormParams(np.ones(dk), p.eps)) * p.alpha.reshape(n, 1, dk)

    if scheme.norm_q:
        q = norm_heads(q, weights.q_norm, heads)
    if scheme.norm_k:
        k = norm_heads(k, weights.k_norm, kv_heads)
    if scheme.norm_v:
        v = norm_heads(v, weights.v_norm, kv_heads)
    if rope_theta is not None:
        q = apply_rope(q, rope_theta)
        k = apply_rope(k, rope_theta)
    k = np.repeat(k, group, axis=0)
    v = np.repeat(v, group, axis=0)
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(dk)
    if causal:
        scores = np.where(np.tril(np.ones((s, s), dtype=bool)), scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    ctx = probs @ v
    if scheme.norm_c:
        ctx = norm_heads(ctx, weights.c_norm, heads)
    out = ctx.transpose(1, 0, 2).reshape(s, heads * dk) @ weights.wo
    return (out, probs) if return_probs else out


# ---------------------------------------------------------------------------
# single-head forward maps used by the Jacobian lemmas
# ---------------------------------------------------------------------------


def _scores_softmax(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    return softmax_rows(q @ k.T / math.sqrt(q.shape[1]))


def prenorm_attention(x, wq, wk, wv, wo) -> np.ndarray:
    """``softmax(X_N W_Q W_K^T X_N^T / sqrt(d_k)) X_N W_V W_O``."""
    xn = rms_norm(x)
    return _scores_softmax(xn @ wq, xn @ wk) @ xn @ wv @ wo


def qkv_attention(x, wq, wk, wv, wo) -> np.ndarray:
    """``softmax(Q_N K_N^T / sqrt(d_k)) V_N W_O`` with ``Q = X W_Q`` etc."""
    x = as_matrix(x)
    qn, kn, vn = rms_norm(x @ wq), rms_norm(x @ wk), rms_norm(x @ wv)
    return _scores_softmax(qn, kn) @ vn @ wo


def preqk_attention(x, wq, wk, wv, wo) -> np.ndarray:
    """Pre-Norm input with normalized queries and keys; values stay ``X_N W_V``."""
    xn = rms_norm(x)
    return _scores_softmax(rms_norm(xn @ wq), rms_norm(xn @ wk)) @ xn @ wv @ wo


@dataclass(frozen=True)
class AttnJacobians:
    dS_dWQ: Jacobian
    dS_dWK: Jacobian
    dS_dWV: Jacobian
    dS_dWO: Jacobian

    def as_dict(self) -> dict[str, Jacobian]:
        return {"WQ": self.dS_dWQ, "WK": self.dS_dWK, "WV": self.dS_dWV, "WO": self.dS_dWO}


def _require_nonzero_rows(m: np.ndarray, what: str) -> None:
    zero = np.flatnonzero(~np.any(m != 0, axis=1))
    if zero.size:
        raise ValueError(f"{what} has zero row(s) {zero.tolist()}")


def _single_head(x, w: AttentionWeights):
    x = as_matrix(x)
    if w.wq.shape != w.wk.shape or w.wq.shape != w.wv.shape or w.wo.shape != w.wq.shape[::-1]:
        raise ValueError("Jacobian lemmas need single-head weights W_Q, W_K, W_V (d x d_k), W_O (d_k x d)")
    if x.shape[1] != w.d:
        raise ValueError("input width does not match weights")
    return x, x.shape[0], w.d, w.dk


def attn_jacobians_prenorm(x, w: AttentionWeights) -> AttnJacobians:
    """Closed-form weight Jacobians of ``S = A X_N W_V W_O`` (Pre-Norm attention)."""
    x, s, d, dk = _single_head(x, w)
    _require_nonzero_rows(x, "X")
    xn = rms_norm(x)
    a = _scores_softmax(xn @ w.wq, xn @ w.wk)
    da_dm = softmax_jacobian(a).dense()
    left = kron(np.eye(s), w.wo.T @ w.wv.T @ xn.T)
    j_o = kron(a @ xn @ w.wv, np.eye(d))
    j_v = kron(a @ xn, w.wo.T)
    j_q = left @ da_dm @ kron(xn, xn @ w.wk) / math.sqrt(dk)
    # d vec_r(W_K^T) / d vec_r(W_K) for the d x d_k matrix W_K
    j_k = left @ da_dm @ kron(xn @ w.wq, xn) @ commutation_matrix(d, dk) / math.sqrt(dk)
    return AttnJacobians(
        Jacobian.from_dense(j_q, (s, d), (d, dk)),
        Jacobian.from_dense(j_k, (s, d), (d, dk)),
        Jacobian.from_dense(j_v, (s, d), (d, dk)),
        Jacobian.from_dense(j_o, (s, d), (dk, d)),
    )


def attn_jacobians_qkv(x, w: AttentionWeights) -> AttnJacobians:
    """Closed-form weight Jacobians of ``S_N = A_N V_N W_O`` (QKV-Norm attention)."""
    x, s, d, dk = _single_head(x, w)
    q, k, v = x @ w.wq, x @ w.wk, x @ w.wv
    for m, name in ((x, "X"), (q, "Q = X W_Q"), (k, "K = X W_K"), (v, "V = X W_V")):
        _require_nonzero_rows(m, name)
    qn, kn, vn = rms_norm(q), rms_norm(k), rms_norm(v)
    a = _scores_softmax(qn, kn)
    da_dm = softmax_jacobian(a).dense()
    x_lift = kron(x, np.eye(dk))
    left = kron(np.eye(s), w.wo.T @ vn.T)
    j_o = kron(a @ vn, np.eye(d))
    j_v = kron(a, w.wo.T) @ rownorm_jacobian(v).dense() @ x_lift
    j_q = left @ da_dm @ kron(np.eye(s), kn) / math.sqrt(dk) @ rownorm_jacobian(q).dense() @ x_lift
    j_k = (left @ da_dm @ kron(qn, np.eye(s)) / math.sqrt(dk)
           @ commutation_matrix(s, dk) @ rownorm_jacobian(k).dense() @ x_lift)
    return AttnJacobians(
        Jacobian.from_dense(j_q, (s, d), (d, dk)),
        Jacobian.from_dense(j_k, (s, d), (d, dk)),
        Jacobian.from_dense(j_v, (s, d), (d, dk)),
        Jacobian.from_dense(j_o, (s, d), (dk, d)),
    )


def attn_jacobians_qk(x, w: AttentionWeights) -> AttnJacobians:
    """Closed-form weight Jacobians of Pre-Norm attention with QK-Norm."""
    x, s, d, dk = _single_head(x, w)
    _require_nonzero_rows(x, "X")
    xn = rms_norm(x)
    qh, kh = xn @ w.wq, xn @ w.wk
    _require_nonzero_rows(qh, "X_N W_Q")
    _require_nonzero_rows(kh, "X_N W_K")
    qn, kn = rms_norm(qh), rms_norm(kh)
    a = _scores_softmax(qn, kn)
    da_dm = softmax_jacobian(a).dense()
    xn_lift = kron(xn, np.eye(dk))
    left = kron(np.eye(s), w.wo.T @ w.wv.T @ xn.T)
    j_o = kron(a @ xn @ w.wv, np.eye(d))
    j_v = kron(a @ xn, w.wo.T)
    j_q = left @ da_dm @ kron(np.eye(s), kn) / math.sqrt(dk) @ rownorm_jacobian(qh).dense() @ xn_lift
    j_k = (left @ da_dm @ kron(qn, np.eye(s)) / math.sqrt(dk)
           @ commutation_matrix(s, dk) @ rownorm_jacobian(kh).dense() @ xn_lift)
    return AttnJacobians(
        Jacobian.from_dense(j_q, (s, d), (d, dk)),
        Jacobian.from_dense(j_k, (s, d), (d, dk)),
        Jacobian.from_dense(j_v, (s, d), (d, dk)),
        Jacobian.from_dense(j_o, (s, d), (dk, d)),
    )


# ---------------------------------------------------------------------------
# gradient-norm bounds
# ---------------------------------------------------------------------------

BOUND_VARIANTS = ("PreNorm", "PreQK", "QKV")

_JACOBIANS = {
    "PreNorm": attn_jacobians_prenorm,
    "PreQK": attn_jacobians_qk,
    "QKV": attn_jacobians_qkv,
}


@dataclass(frozen=True)
class BoundEntry:
    """Measured Frobenius norm of one weight Jacobian against two bounds.

    ``bound`` follows the published inequality chain with every norm fact
    evaluated for RMS-normalized rows (norm ``sqrt(width)``) and with the
    smallest gain of ``W^T`` over the actual input rows in place of the
    weight's smallest singular value. ``printed_bound`` is the closed form as
    printed. ``inf`` marks a vacuous bound.
    """

    weight: str
    measured: float
    bound: float
    printed_bound: float

    @property
    def slack(self) -> float:
        return 0.0 if math.isinf(self.bound) else self.measured / self.bound

    @property
    def printed_slack(self) -> float:
        return 0.0 if math.isinf(self.printed_bound) else self.measured / self.printed_bound

    @property
    def vacuous(self) -> bool:
        return math.isinf(self.bound)

    @property
    def violated(self) -> bool:
        return self.measured > self.bound

    @property
    def printed_violated(self) -> bool:
        return self.measured > self.printed_bound


@dataclass(frozen=True)
class BoundReport:
    variant: str
    s: int
    d: int
    dk: int
    entries: dict[str, BoundEntry] = field(default_factory=dict)

    @property
    def violations(self) -> int:
        return sum(e.violated for e in self.entries.values())

    @property
    def printed_violations(self) -> int:
        return sum(e.printed_violated for e in self.entries.values())

    @property
    def max_slack(self) -> float:
        return max(e.slack for e in self.entries.values())


def input_gain(w, rows) -> float:
    """``min_i |W^T r_i| / |r_i|``: the weakest stretch of ``W^T`` over the given rows."""
    w = as_matrix(w)
    rows = as_matrix(rows)
    return float(np.min(np.linalg.norm(rows @ w, axis=1) / np.linalg.norm(rows, axis=1)))


def _inv(x: float) -> float:
    return math.inf if x == 0.0 else 1.0 / x


def gradient_bounds(variant: str, x, w: AttentionWeights) -> BoundReport:
    """Evaluate the weight-gradient bounds of ``variant`` and the measured norms.

    ``variant`` is one of ``PreNorm``, ``PreQK`` (Pre-Norm with QK-Norm) or
    ``QKV``. Measurements come from the closed-form Jacobians.
    """
    if variant not in _JACOBIANS:
        raise ValueError(f"unknown bound variant {variant!r}; expected one of {BOUND_VARIANTS}")
    x, s, d, dk = _single_head(x, w)
    jac = _JACOBIANS[variant](x, w).as_dict()
    measured = {k: frobenius_norm(j.matrix) for k, j in jac.items()}

    nq, nk, nv, no = (spectral_norm(m) for m in (w.wq, w.wk, w.wv, w.wo))
    no_f = frobenius_norm(w.wo)
    xn_f = math.sqrt(s * d)  # every row of X_N has norm sqrt(d)
    sq_s = math.sqrt(s)      # |A|_2 <= sqrt(s) for a row-stochastic A

    if variant == "PreNorm":
        c_qk = xn_f**3 / (2 * math.sqrt(dk)) * nv * no
        bound = {
            "WO": math.sqrt(d) * sq_s * xn_f * nv,
            "WV": sq_s * xn_f * no_f,
            "WQ": c_qk * nk,
            "WK": c_qk * nq,
        }
        p = s**1.5 / (2 * math.sqrt(dk)) * nv * no
        printed = {
            "WO": s * math.sqrt(d) * nv,
            "WV": s * no_f,
            "WQ": p * nk,
            "WK": p * nq,
        }
    else:
        rows = rms_norm(x) if variant == "PreQK" else x
        inv_gq, inv_gk = _inv(input_gain(w.wq, rows)), _inv(input_gain(w.wk, rows))
        inv_sq, inv_sk = _inv(min_singular_value(w.wq)), _inv(min_singular_value(w.wk))
        # |dN/dY (rows kron I)|_F <= sqrt(s) d_k / gain
        lift = sq_s * dk
        if variant == "PreQK":
            # (1/sqrt(dk)) |W_O| |W_V| |X_N|_2 (1/2) |K_N|_2 * lift / gain
            c = 0.5 / math.sqrt(dk) * no * nv * xn_f * math.sqrt(s * dk) * lift
            bound = {
                "WO": math.sqrt(d) * sq_s * xn_f * nv,
                "WV": sq_s * xn_f * no_f,
                "WQ": c * inv_gq,
                "WK": c * inv_gk,
            }
            p = s * math.sqrt(s * dk) / 2 * nv * no
            printed = {
                "WO": s * math.sqrt(d) * nv,
                "WV": s * no_f,
                "WQ": p * inv_sq,
                "WK": p * inv_sk,
            }
        else:
            inv_gv = _inv(input_gain(w.wv, rows))
            inv_sv = _inv(min_singular_value(w.wv))
            c = 0.5 / math.sqrt(dk) * no * (s * dk) * lift
            bound = {
                "WO": math.sqrt(d) * sq_s * math.sqrt(s * dk),
                "WV": sq_s * no * lift * inv_gv,
                "WQ": c * inv_gq,
                "WK": c * inv_gk,
            }
            p = s * math.sqrt(s * dk) / 2 * no
            printed = {
                "WO": s * math.sqrt(d),
                "WV": s * dk * no * inv_sv,
                "WQ": p * inv_sq,
                "WK": p * inv_sk,
            }
    entries = {k: BoundEntry(k, measured[k], bound[k], printed[k]) for k in ("WQ", "WK", "WV", "WO")}
    return BoundReport(variant, s, d, dk, entries)
