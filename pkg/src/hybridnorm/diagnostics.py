"""Analysis instruments: per-layer gradient norms, token cosine similarity,
attention entropy, bound-sampling campaigns and parameter/FLOP accounting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .attention import (
    BOUND_VARIANTS,
    AttentionWeights,
    attn_jacobians_prenorm,
    attn_jacobians_qk,
    attn_jacobians_qkv,
    gradient_bounds,
    preqk_attention,
    prenorm_attention,
    qkv_attention,
)
from .blocks import BlockScheme, ModelConfig, ModelParams, loss_and_grads, model_forward, param_shapes
from .vecjac import finite_diff_jacobian

__all__ = [
    "splitmix64",
    "derive_seed",
    "per_layer_grad_norms",
    "token_cosine_similarity",
    "mean_pairwise_cosine",
    "attention_entropy",
    "row_entropy",
    "LEMMAS",
    "GradcheckReport",
    "lemma_gradcheck",
    "CampaignSummary",
    "bound_campaign",
    "CostReport",
    "cost_report",
    "model_cost_counts",
    "DiagnosticsRecord",
    "RECORD_CSV_HEADER",
    "records_to_csv",
    "spearman",
]

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the splitmix64 mixer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Per-trial seed: ``splitmix64(splitmix64(seed) + index)``."""
    return splitmix64((splitmix64(seed & _MASK64) + index) & _MASK64)


def _split_batch(batch) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(batch, tuple):
        tokens, targets = batch
        tokens = np.atleast_2d(np.asarray(tokens))
        return tokens, np.atleast_2d(np.asarray(targets))
    return np.atleast_2d(np.asarray(batch)), None


# ---------------------------------------------------------------------------
# per-layer profiles
# ---------------------------------------------------------------------------


def per_layer_grad_norms(config: ModelConfig, params: ModelParams, batch) -> np.ndarray:
    """Euclidean norm of all layer-``l`` parameter gradients, averaged over sequences.

    ``batch`` is ``(tokens, targets)``. Each sequence is differentiated on its
    own and the per-layer norms are averaged. A non-finite loss on any
    sequence makes every entry NaN, which marks the record divergent.
    """
    tokens, targets = _split_batch(batch)
    if targets is None:
        raise ValueError("per_layer_grad_norms needs (tokens, targets)")
    total = np.zeros(config.layers)
    for tok, tgt in zip(tokens, targets):
        loss, grads = loss_and_grads(config, params, tok, tgt)
        if not math.isfinite(loss):
            return np.full(config.layers, np.nan)
        for layer in range(config.layers):
            sq = sum(float(np.sum(grads[n] ** 2)) for n in params.layer_names(layer))
            total[layer] += math.sqrt(sq)
    return total / len(tokens)


def mean_pairwise_cosine(x) -> float:
    """Mean cosine similarity over unordered row pairs; zero rows count as 0."""
    x = np.asarray(x, dtype=np.float64)
    s = x.shape[0]
    if s < 2:
        raise ValueError("need at least two tokens")
    # rescale by the row max first so tiny rows do not underflow when squared
    m = np.max(np.abs(x), axis=1, keepdims=True)
    y = np.divide(x, m, out=np.zeros_like(x), where=m > 0)
    norms = np.linalg.norm(y, axis=1, keepdims=True)
    u = np.divide(y, norms, out=np.zeros_like(y), where=norms > 0)
    g = u @ u.T
    iu = np.triu_indices(s, k=1)
    return float(np.mean(g[iu]))


def token_cosine_similarity(config: ModelConfig, params: ModelParams, batch) -> np.ndarray:
    """Per-layer mean pairwise cosine similarity of the block outputs."""
    tokens, _ = _split_batch(batch)
    trace: dict = {}
    model_forward(config, params, tokens, trace=trace)
    return np.array([
        np.mean([mean_pairwise_cosine(seq) for seq in out]) for out in trace["layer_outputs"]
    ])


def row_entropy(p) -> np.ndarray:
    """Shannon entropy of each row along the last axis with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logp, axis=-1)


def attention_entropy(config: ModelConfig, params: ModelParams, batch) -> np.ndarray:
    """Per-layer attention entropy averaged over rows, heads and sequences.

    Masked positions carry zero probability and so drop out of the sum.
    """
    tokens, _ = _split_batch(batch)
    trace: dict = {}
    model_forward(config, params, tokens, trace=trace)
    return np.array([float(np.mean(row_entropy(p))) for p in trace["attn_probs"]])


def spearman(a, b) -> float:
    """Spearman rank correlation (ties get average ranks)."""
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


# ---------------------------------------------------------------------------
# lemma gradchecks
# ---------------------------------------------------------------------------

# variant -> (forward map S(X, W_Q, W_K, W_V, W_O), closed-form Jacobians)
LEMMAS = {
    "PreNorm": (prenorm_attention, attn_jacobians_prenorm),
    "PreQK": (preqk_attention, attn_jacobians_qk),
    "QKV": (qkv_attention, attn_jacobians_qkv),
}
_WEIGHT_ARGS = {"WQ": 1, "WK": 2, "WV": 3, "WO": 4}


@dataclass
class GradcheckReport:
    abs_tol: float
    rel_tol: float
    # (variant, s, d, dk, seed, weight, abs_err, rel_err, ok)
    rows: list = field(default_factory=list)

    @property
    def failures(self) -> list:
        return [r for r in self.rows if not r[-1]]

    @property
    def passed(self) -> bool:
        return not self.failures

    def worst(self) -> dict:
        """``(variant, weight) -> (max abs error, max rel error)``."""
        out: dict = {}
        for v, *_, w, ea, er, _ok in self.rows:
            a, r = out.get((v, w), (0.0, 0.0))
            out[(v, w)] = (max(a, ea), max(r, er))
        return out


def lemma_gradcheck(variants, dims, seeds: int, seed: int = 0, h: float = 1e-5,
                    abs_tol: float = 1e-6, rel_tol: float = 1e-5, lemmas: dict | None = None) -> GradcheckReport:
    """Compare closed-form weight Jacobians with central differences.

    An entry passes when the max abs error is within ``abs_tol`` or the
    error relative to the largest finite-difference entry is within
    ``rel_tol``. ``lemmas`` overrides :data:`LEMMAS` (used for negative
    controls).
    """
    table = LEMMAS if lemmas is None else lemmas
    rep = GradcheckReport(abs_tol, rel_tol)
    index = 0
    for variant in variants:
        if variant not in table:
            raise ValueError(f"unknown variant {variant!r}")
        fwd, jac_fn = table[variant]
        for s, d, dk in dims:
            for k in range(seeds):
                rng = np.random.default_rng(derive_seed(seed, index))
                index += 1
                x = rng.normal(size=(s, d))
                w = AttentionWeights.random(d, dk, rng)
                analytic = jac_fn(x, w).as_dict()
                args = [x, w.wq, w.wk, w.wv, w.wo]
                for name, pos in _WEIGHT_ARGS.items():
                    def f(m, pos=pos):
                        a = list(args)
                        a[pos] = m
                        return fwd(*a)
                    fd = finite_diff_jacobian(f, args[pos], h).matrix
                    ea = float(np.max(np.abs(analytic[name].matrix - fd)))
                    er = ea / max(float(np.max(np.abs(fd))), 1e-300)
                    rep.rows.append((variant, s, d, dk, k, name, ea, er, ea <= abs_tol or er <= rel_tol))
    return rep


# ---------------------------------------------------------------------------
# bound campaigns
# ---------------------------------------------------------------------------


@dataclass
class CampaignSummary:
    variant: str
    trials: int
    checks: int = 0
    violations: int = 0
    printed_violations: int = 0
    vacuous: int = 0
    max_slack: dict = field(default_factory=dict)
    printed_max_slack: dict = field(default_factory=dict)
    # bound(W_K scaled) / bound(W_K) for the dS/dW_Q entry, corrected and printed forms
    coupling_wq: float = float("nan")
    printed_coupling_wq: float = float("nan")
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _random_instance(rng: np.random.Generator, s: int, d: int, dk: int):
    x = rng.normal(size=(s, d)) * float(rng.choice([0.1, 1.0, 10.0]))
    w = AttentionWeights.random(d, dk, rng, scale=float(rng.choice([0.3, 1.0, 3.0])))
    return x, w


def bound_campaign(variant: str, trials: int, dims, seed: int, coupling_scale: float = 5.0) -> CampaignSummary:
    """Sample ``trials`` instances per ``(s, d, d_k)`` in ``dims`` and check every bound.

    Trial ``i`` draws from ``default_rng(derive_seed(seed, i))``. ``rows``
    holds one tuple per (dims, trial, weight) for CSV export. The coupling
    contrast is measured on the first instance by multiplying ``W_K`` by
    ``coupling_scale``.
    """
    if variant not in BOUND_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    dims = [tuple(int(v) for v in dd) for dd in dims]
    out = CampaignSummary(variant, trials)
    index = 0
    for s, d, dk in dims:
        for t in range(trials):
            rng = np.random.default_rng(derive_seed(seed, index))
            index += 1
            x, w = _random_instance(rng, s, d, dk)
            rep = gradient_bounds(variant, x, w)
            for name, e in rep.entries.items():
                out.checks += 1
                out.violations += e.violated
                out.printed_violations += e.printed_violated
                out.vacuous += e.vacuous
                if not e.vacuous:
                    out.max_slack[name] = max(out.max_slack.get(name, 0.0), e.slack)
                if math.isfinite(e.printed_bound) and e.printed_bound > 0:
                    out.printed_max_slack[name] = max(out.printed_max_slack.get(name, 0.0), e.printed_slack)
                out.rows.append((variant, s, d, dk, t, name, e.measured, e.bound, e.printed_bound,
                                 int(e.violated), int(e.printed_violated)))
            if index == 1:
                scaled = gradient_bounds(variant, x, w.scaled(wk=coupling_scale))
                base, new = rep.entries["WQ"], scaled.entries["WQ"]
                out.coupling_wq = new.bound / base.bound
                out.printed_coupling_wq = new.printed_bound / base.printed_bound
    return out


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    """Exact norm vs. matmul cost, embedding and output layers excluded.

    ``param_ratio`` is norm / (main + norm); ``flops_ratio`` is norm / main,
    matching the two closed forms of the accounting table.
    """

    scheme: str
    d: int
    s: int
    L: int
    norm_params: int
    main_params: int
    norm_flops: int
    main_flops: int
    param_ratio: Fraction
    param_ratio_approx: Fraction
    flops_ratio: Fraction
    model_norm_params: int | None = None
    model_main_params: int | None = None

    @property
    def model_matches(self) -> bool | None:
        if self.model_norm_params is None:
            return None
        return self.model_norm_params == self.norm_params and self.model_main_params == self.main_params

    def as_row(self) -> dict:
        row = asdict(self)
        for key in ("param_ratio", "param_ratio_approx", "flops_ratio"):
            row[key] = str(row[key])
        row["flops_ratio_float"] = float(self.flops_ratio)
        row["param_ratio_float"] = float(self.param_ratio)
        return row


COST_SCHEMES = {"PreNorm": 2, "HybridNorm": 4}


def model_cost_counts(scheme: str, d: int, L: int, heads: int = 1) -> tuple[int, int] | None:
    """Norm-gain and linear-weight counts of the instantiated block stack.

    Uses the SwiGLU width ``8d/3``, so ``d`` must be divisible by 3. Returns
    ``None`` otherwise.
    """
    if d % 3 or d % heads:
        return None
    cfg = ModelConfig(layers=L, d_model=d, heads=heads, ffn_dim=8 * d // 3, vocab_size=2,
                      context_length=2, block_scheme=scheme, rope_theta=None)
    norm = main = 0
    for name, shape in param_shapes(cfg):
        if not name.startswith("layers."):
            continue
        n = math.prod(shape)
        if ".norm." in name:
            norm += n
        else:
            main += n
    return norm, main


def cost_report(scheme: str, d: int, s: int, L: int, cross_check: bool = True) -> CostReport:
    name = BlockScheme.parse(scheme).name
    if name not in COST_SCHEMES:
        raise ValueError(f"cost accounting covers {sorted(COST_SCHEMES)}, got {scheme!r}")
    for key, v in (("d", d), ("s", s), ("L", L)):
        if int(v) != v or v < 1:
            raise ValueError(f"{key} must be a positive integer")
    k = COST_SCHEMES[name]  # norms per layer
    norm_params = k * d * L
    main_params = 12 * d * d * L
    norm_flops = 4 * k * s * d * L
    main_flops = (24 * s * d * d + 4 * s * s * d) * L
    counts = model_cost_counts(name, d, L) if cross_check else None
    return CostReport(
        scheme=name, d=d, s=s, L=L,
        norm_params=norm_params,
        main_params=main_params,
        norm_flops=norm_flops,
        main_flops=main_flops,
        param_ratio=Fraction(norm_params, main_params + norm_params),
        param_ratio_approx=Fraction(k, 12 * d),
        flops_ratio=Fraction(norm_flops, main_flops),
        model_norm_params=None if counts is None else counts[0],
        model_main_params=None if counts is None else counts[1],
    )


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

RECORD_CSV_HEADER = ("run_id", "scheme", "init", "seed", "step", "layer", "metric", "value", "divergent")


@dataclass
class DiagnosticsRecord:
    """Per-layer scalars of one snapshot; ``values`` holds (layer, metric, value)."""

    run_id: str
    scheme: str
    init: str
    seed: int
    step: int
    values: list = field(default_factory=list)
    divergent: bool = False
    metadata: dict = field(default_factory=dict)

    def add(self, metric: str, per_layer) -> None:
        per_layer = [float(v) for v in per_layer]
        if not all(math.isfinite(v) for v in per_layer):
            self.divergent = True
        self.values.extend((i, metric, v) for i, v in enumerate(per_layer))

    def metric(self, name: str) -> list[float]:
        return [v for _, m, v in self.values if m == name]

    def to_json(self) -> str:
        data = asdict(self)
        data["values"] = [list(v) for v in self.values]
        return json.dumps(data, sort_keys=True, indent=1, allow_nan=True)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_CSV_HEADER)
    for r in records:
        for layer, metric, value in r.values:
            w.writerow((r.run_id, r.scheme, r.init, r.seed, r.step, layer, metric, repr(value), int(r.divergent)))
    return buf.getvalue()
