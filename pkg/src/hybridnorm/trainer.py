"""Toy causal-LM training: AdamW, warmup plus cosine schedule, global-norm clipping."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .blocks import ConfigError, ModelConfig, ModelParams, init_params, loss_and_grads
from .checkpoint import Checkpoint, save_checkpoint
from .corpus import EXCERPT
from .diagnostics import derive_seed

__all__ = [
    "DATASETS",
    "TrainConfig",
    "OptimizerState",
    "StepMetrics",
    "MetricsLog",
    "METRICS_HEADER",
    "lr_schedule",
    "global_norm",
    "clip_grads",
    "adamw_step",
    "synthetic_dataset",
    "train",
]

DATASETS = ("copy", "modular-add", "byte-text")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr_peak: float = 1e-3
    lr_min: float = 1e-4
    warmup_steps: int = 50
    total_steps: int = 500
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    adam_eps: float = 1e-8
    clip: float = 1.0
    seed: int = 0
    dataset: str = "copy"
    dataset_length: int = 20_000
    eval_interval: int = 100
    eval_batches: int = 4
    # a finite loss above this also counts as divergence; None disables
    divergence_loss: float | None = None

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.validate()

    def validate(self) -> None:
        if not 0 < self.lr_min <= self.lr_peak:
            raise ConfigError("lr_min", "need 0 < lr_min <= lr_peak")
        if not isinstance(self.total_steps, int) or self.total_steps < 1:
            raise ConfigError("total_steps", "must be a positive integer")
        if not isinstance(self.warmup_steps, int) or not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("warmup_steps", "need 0 <= warmup_steps <= total_steps")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(key, "must lie in [0, 1)")
        for key in ("batch_size", "eval_interval", "eval_batches"):
            if not isinstance(getattr(self, key), int) or getattr(self, key) < 1:
                raise ConfigError(key, "must be a positive integer")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be non-negative")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps", "must be positive")
        if self.clip <= 0:
            raise ConfigError("clip", "must be positive")
        if self.dataset not in DATASETS:
            raise ConfigError("dataset", f"must be one of {', '.join(DATASETS)}")
        if self.dataset_length < self.model.context_length + 1:
            raise ConfigError("dataset_length", "must exceed the context length")
        if not self.model.causal:
            raise ConfigError("model.causal", "training needs a causal model")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown training config key")
        return cls(**data)


def lr_schedule(cfg: TrainConfig, step: int) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine decay to ``lr_min`` at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.lr_min
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * (1.0 + math.cos(math.pi * frac)) / 2.0


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grads(grads: dict[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    """Scale all gradients by ``threshold / g`` when the global norm ``g`` exceeds it."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    g = global_norm(grads)
    if g <= threshold:
        return grads
    scale = threshold / g
    return {k: v * scale for k, v in grads.items()}


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, 0)


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay targets linear weights only: not gains, not the embedding."""
    return value.ndim >= 2 and name != "embed"


def adamw_step(params, grads, state: OptimizerState, cfg: TrainConfig, lr: float):
    """One decoupled-weight-decay Adam update; returns new ``(params, state)``.

    ``params`` may be a plain dict or :class:`ModelParams`; inputs are not
    modified.
    """
    b1, b2 = cfg.beta1, cfg.beta2
    t = state.t + 1
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay and decays(name, theta):
            step = step + cfg.weight_decay * theta
        new_p[name] = theta - lr * step
        new_m[name], new_v[name] = m, v
    out = ModelParams(params.config, new_p) if isinstance(params, ModelParams) else new_p
    return out, OptimizerState(new_m, new_v, t)


def synthetic_dataset(kind: str, seed: int, length: int, vocab_size: int = 256,
                      prefix_len: int = 8, alphabet: int = 16) -> np.ndarray:
    """Deterministic token stream of exactly ``length`` ids.

    ``copy``: records ``p DELIM p`` with ``p`` a random prefix of
    ``prefix_len`` symbols from a ``alphabet``-sized set (ids 2..), DELIM = 1.
    ``modular-add``: triples ``a b (a + b) mod vocab``.
    ``byte-text``: the bundled excerpt as UTF-8 bytes, repeated.
    """
    if length < 1:
        raise ValueError("length must be positive")
    rng = np.random.default_rng(seed)
    if kind == "copy":
        alphabet = min(alphabet, vocab_size - 2)
        if alphabet < 1:
            raise ValueError("copy task needs vocab_size >= 3")
        n = -(-length // (2 * prefix_len + 1))
        p = rng.integers(2, 2 + alphabet, size=(n, prefix_len))
        rec = np.concatenate([p, np.ones((n, 1), dtype=p.dtype), p], axis=1)
        stream = rec.reshape(-1)
    elif kind == "modular-add":
        n = -(-length // 3)
        a = rng.integers(0, vocab_size, n)
        b = rng.integers(0, vocab_size, n)
        stream = np.stack([a, b, (a + b) % vocab_size], axis=1).reshape(-1)
    elif kind == "byte-text":
        if vocab_size < 256:
            raise ValueError("byte-text needs vocab_size >= 256")
        data = np.frombuffer(EXCERPT.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        stream = np.tile(data, -(-length // data.size))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    return np.ascontiguousarray(stream[:length], dtype=np.int64)


def _windows(stream: np.ndarray, rng: np.random.Generator, batch: int, ctx: int):
    starts = rng.integers(0, stream.size - ctx, size=batch)
    idx = starts[:, None] + np.arange(ctx + 1)[None, :]
    w = stream[idx]
    return w[:, :-1], w[:, 1:]


@dataclass(frozen=True)
class StepMetrics:
    step: int
    lr: float
    loss: float
    grad_norm: float
    diverged: bool


METRICS_HEADER = ("step", "lr", "loss", "grad_norm", "diverged")


@dataclass
class MetricsLog:
    steps: list[StepMetrics] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)
    diverged_at: int | None = None
    params: ModelParams | None = field(default=None, repr=False, compare=False)
    opt_state: OptimizerState | None = field(default=None, repr=False, compare=False)

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for s in self.steps:
            w.writerow((s.step, repr(s.lr), repr(s.loss), repr(s.grad_norm), int(s.diverged)))
        return buf.getvalue()

    def evals_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step", "val_loss"))
        for step, loss in self.evals:
            w.writerow((step, repr(loss)))
        return buf.getvalue()


def _eval_loss(cfg: TrainConfig, params: ModelParams, batches) -> float:
    return float(np.mean([loss_and_grads(cfg.model, params, x, y)[0] for x, y in batches]))


def train(cfg: TrainConfig, out_dir=None, callback: Callable[[int, ModelParams], None] | None = None,
          stop_after: int | None = None) -> MetricsLog:
    """Run the full loop; divergence ends training early and is logged, not raised.

    ``callback(step, params)`` fires at the start of each step with the
    parameters the step's gradient is taken at. ``stop_after`` truncates the
    run without changing the schedule. With ``out_dir`` the metric CSVs and
    a final checkpoint (with optimizer state) are written there.
    """
    mc = cfg.model
    params = init_params(mc, cfg.seed)
    state = OptimizerState.zeros_like(params)
    stream = synthetic_dataset(cfg.dataset, derive_seed(cfg.seed, 1), cfg.dataset_length, mc.vocab_size)
    val_stream = synthetic_dataset(cfg.dataset, derive_seed(cfg.seed, 2), cfg.dataset_length, mc.vocab_size)
    batch_rng = np.random.default_rng(derive_seed(cfg.seed, 3))
    val_rng = np.random.default_rng(derive_seed(cfg.seed, 4))
    val = [_windows(val_stream, val_rng, cfg.batch_size, mc.context_length) for _ in range(cfg.eval_batches)]

    log = MetricsLog()
    last = cfg.total_steps if stop_after is None else min(stop_after, cfg.total_steps)
    for step in range(1, last + 1):
        if callback is not None:
            callback(step, params)
        lr = lr_schedule(cfg, step)
        x, y = _windows(stream, batch_rng, cfg.batch_size, mc.context_length)
        loss, grads = loss_and_grads(mc, params, x, y)
        with np.errstate(over="ignore", invalid="ignore"):
            gnorm = global_norm(grads)
        bad = not (math.isfinite(loss) and math.isfinite(gnorm))
        if not bad and cfg.divergence_loss is not None and loss > cfg.divergence_loss:
            bad = True
        log.steps.append(StepMetrics(step, lr, loss, gnorm, bad))
        if bad:
            log.diverged_at = step
            break
        params, state = adamw_step(params, clip_grads(grads, cfg.clip), state, cfg, lr)
        if step % cfg.eval_interval == 0 or step == last:
            log.evals.append((step, _eval_loss(cfg, params, val)))
    log.params, log.opt_state = params, state

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(log.to_csv())
        (out / "eval.csv").write_text(log.evals_csv())
        save_checkpoint(out / "checkpoint.bin", Checkpoint(
            mc, params, cfg.seed, state.t, state.t, state.m, state.v,
            {"diverged_at": log.diverged_at},
        ))
    return log
