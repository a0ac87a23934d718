"""Transformer blocks for every normalization placement, plus the model stack.

A block is described by a :class:`Layout`: whether the attention input is
normalized, which attention-internal scheme runs, where the residual taps
from, and which of four FFN forms closes the block::

    pre      X' = FFN(Norm(Y)) + Y
    hybrid   X' = FFN(Norm(Y)) + Norm(Y)
    post     X' = Norm(FFN(Y) + Y)
    output   X' = Y + Norm(FFN(Y))

Named schemes (PostNorm, PreNorm, HybridNorm, ...) and the ``#-Post``,
``#-Pre``, ``Pre-#-Post``, ``Pre-#-Pre`` templates all resolve to layouts.
Forward and backward passes run on :mod:`hybridnorm.autograd`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .attention import AttnNormScheme

__all__ = [
    "ConfigError",
    "BlockScheme",
    "Layout",
    "FirstBlockVariant",
    "InitScheme",
    "ModelConfig",
    "ModelParams",
    "ffn_swiglu",
    "block_forward",
    "model_forward",
    "forward_hidden",
    "loss_and_grads",
    "init_params",
    "trunc_normal",
    "param_shapes",
]


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class Layout:
    pre_attn: bool = False
    attn: AttnNormScheme = AttnNormScheme.VANILLA
    residual_from_norm: bool = False
    post_attn: bool = False
    attn_out_norm: bool = False
    ffn: str = "pre"

    def norm_keys(self) -> list[str]:
        """Block-level norm parameter names in canonical order."""
        keys = []
        if self.pre_attn:
            keys.append("attn_in")
        if self.attn_out_norm:
            keys.append("attn_out")
        if self.post_attn:
            keys.append("attn_post")
        keys.append({"pre": "ffn_in", "hybrid": "ffn_in", "post": "ffn_post", "output": "ffn_out"}[self.ffn])
        return keys

    def attn_keys(self) -> list[str]:
        a = self.attn
        return [k for k, on in (("q", a.norm_q), ("k", a.norm_k), ("v", a.norm_v), ("c", a.norm_c)) if on]


_TEMPLATES = {
    "#-Post": (False, "hybrid"),
    "#-Pre": (False, "pre"),
    "Pre-#-Post": (True, "hybrid"),
    "Pre-#-Pre": (True, "pre"),
}

_NAMED = {
    "PostNorm": Layout(post_attn=True, ffn="post"),
    "PreNorm": Layout(pre_attn=True, ffn="pre"),
    "PrePost": Layout(pre_attn=True, ffn="hybrid"),
    "PostPre": Layout(pre_attn=True, residual_from_norm=True, ffn="pre"),
    "OutputNorm": Layout(attn_out_norm=True, ffn="output"),
}

_ALIASES = {
    "HybridNorm": ("#-Post", AttnNormScheme.QKV),
    "PreQK": ("Pre-#-Pre", AttnNormScheme.QK),
    "Pre-Post": ("PrePost", AttnNormScheme.VANILLA),
    "Post-Pre": ("PostPre", AttnNormScheme.VANILLA),
    "Mix-LN": ("MixLN", AttnNormScheme.VANILLA),
    "Post-Norm": ("PostNorm", AttnNormScheme.VANILLA),
    "Pre-Norm": ("PreNorm", AttnNormScheme.VANILLA),
}


@dataclass(frozen=True)
class BlockScheme:
    """Block-level normalization placement.

    ``kind`` is a named scheme (``PostNorm``, ``PreNorm``, ``PrePost``,
    ``PostPre``, ``MixLN``, ``OutputNorm``) or a template (``#-Post``,
    ``#-Pre``, ``Pre-#-Post``, ``Pre-#-Pre``) filled with ``attn``.
    """

    kind: str
    attn: AttnNormScheme = AttnNormScheme.VANILLA

    def __post_init__(self):
        if self.kind not in _NAMED and self.kind not in _TEMPLATES and self.kind != "MixLN":
            raise ValueError(f"unknown block scheme kind {self.kind!r}")
        object.__setattr__(self, "attn", AttnNormScheme(self.attn))

    @classmethod
    def parse(cls, name: "str | BlockScheme") -> "BlockScheme":
        """Parse ``HybridNorm``, ``PreNorm``, ``QKV-Post``, ``Pre-QK-Pre``, ``KC-Pre`` and friends."""
        if isinstance(name, BlockScheme):
            return name
        if name in _ALIASES:
            kind, attn = _ALIASES[name]
            return cls(kind, attn)
        if name in _NAMED or name == "MixLN":
            return cls(name)
        parts = name.split("-")
        if len(parts) == 2 and parts[1] in ("Post", "Pre"):
            return cls(f"#-{parts[1]}", AttnNormScheme.parse(parts[0]))
        if len(parts) == 3 and parts[0] == "Pre" and parts[2] in ("Post", "Pre"):
            return cls(f"Pre-#-{parts[2]}", AttnNormScheme.parse(parts[1]))
        raise ValueError(f"cannot parse block scheme {name!r}")

    @property
    def name(self) -> str:
        for alias, (kind, attn) in _ALIASES.items():
            if "-" not in alias and kind == self.kind and attn == self.attn and kind in _TEMPLATES:
                return alias
        if self.kind in _TEMPLATES:
            return self.kind.replace("#", self.attn.value)
        return self.kind

    def layout(self, layer: int = 0, n_layers: int = 1, mixln_split: float = 0.25) -> Layout:
        if self.kind == "MixLN":
            # Post-Norm for the earliest floor(split * L) layers, Pre-Norm after
            kind = "PostNorm" if layer < math.floor(mixln_split * n_layers) else "PreNorm"
            return _NAMED[kind]
        if self.kind in _NAMED:
            return _NAMED[self.kind]
        pre, ffn = _TEMPLATES[self.kind]
        return Layout(pre_attn=pre, attn=self.attn, ffn=ffn)

    def __str__(self) -> str:
        return self.name


class FirstBlockVariant(str, enum.Enum):
    SAME_AS_REST = "SameAsRest"
    HYBRID_STAR = "HybridStar"
    FIRST_QKV_PRE = "FirstQKVPre"
    EMBED_NORM = "EmbedNorm"


class InitScheme(str, enum.Enum):
    NORMAL = "Normal"
    DEPTH_SCALED = "DepthScaled"
    MEGATRON = "Megatron"


_FIRST_LAYOUTS = {
    FirstBlockVariant.HYBRID_STAR: Layout(pre_attn=True, attn=AttnNormScheme.QKV, ffn="pre"),
    FirstBlockVariant.FIRST_QKV_PRE: Layout(attn=AttnNormScheme.QKV, ffn="pre"),
}


def _default_ffn_dim(d: int) -> int:
    f = math.ceil(8 * d / 3)
    return -(-f // 8) * 8


@dataclass
class ModelConfig:
    """Architecture of a toy decoder-only model."""

    layers: int = 4
    d_model: int = 64
    heads: int = 4
    kv_heads: int | None = None
    ffn_dim: int | None = None
    vocab_size: int = 256
    context_length: int = 64
    block_scheme: str = "HybridNorm"
    first_block: str = "SameAsRest"
    init: str = "Megatron"
    rope_theta: float | None = 500_000.0
    tie_weights: bool = True
    causal: bool = True
    mixln_split: float = 0.25
    attn_output_norm: bool = False
    norm_eps: float = 1e-8
    qkv_gain: str = "per_head"

    def __post_init__(self):
        if self.kv_heads is None:
            self.kv_heads = self.heads
        if self.ffn_dim is None and isinstance(self.d_model, int) and self.d_model > 0:
            self.ffn_dim = _default_ffn_dim(self.d_model)
        if isinstance(self.block_scheme, BlockScheme):
            self.block_scheme = self.block_scheme.name
        for key in ("first_block", "init"):
            val = getattr(self, key)
            if isinstance(val, enum.Enum):
                setattr(self, key, val.value)
        self.validate()

    def validate(self) -> None:
        for key in ("layers", "d_model", "heads", "kv_heads", "ffn_dim", "vocab_size", "context_length"):
            val = getattr(self, key)
            if not isinstance(val, (int, np.integer)) or isinstance(val, bool) or val < 1:
                raise ConfigError(key, f"must be a positive integer, got {val!r}")
        if self.d_model % self.heads:
            raise ConfigError("heads", f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.heads % self.kv_heads:
            raise ConfigError("kv_heads", f"heads={self.heads} not divisible by kv_heads={self.kv_heads}")
        if not 0.0 < self.mixln_split < 1.0:
            raise ConfigError("mixln_split", "must lie strictly between 0 and 1")
        if self.norm_eps < 0:
            raise ConfigError("norm_eps", "must be non-negative")
        if self.qkv_gain not in ("per_head", "shared"):
            raise ConfigError("qkv_gain", "must be 'per_head' or 'shared'")
        if self.rope_theta is not None and (self.head_dim % 2 or self.rope_theta <= 0):
            raise ConfigError("rope_theta", "rotary encoding needs an even head dim and positive theta")
        try:
            BlockScheme.parse(self.block_scheme)
        except ValueError as exc:
            raise ConfigError("block_scheme", str(exc)) from None
        for key, enum_cls in (("first_block", FirstBlockVariant), ("init", InitScheme)):
            try:
                enum_cls(getattr(self, key))
            except ValueError:
                choices = ", ".join(m.value for m in enum_cls)
                raise ConfigError(key, f"{getattr(self, key)!r} is not one of {choices}") from None

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def scheme(self) -> BlockScheme:
        return BlockScheme.parse(self.block_scheme)

    @property
    def first(self) -> FirstBlockVariant:
        return FirstBlockVariant(self.first_block)

    @property
    def init_scheme(self) -> InitScheme:
        return InitScheme(self.init)

    def layout(self, layer: int) -> Layout:
        if layer == 0 and self.first in _FIRST_LAYOUTS:
            return _FIRST_LAYOUTS[self.first]
        return self.scheme.layout(layer, self.layers, self.mixln_split)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config key")
        return cls(**data)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f, dk = cfg.d_model, cfg.ffn_dim, cfg.head_dim
    hq, hkv = cfg.heads * dk, cfg.kv_heads * dk
    shapes: list[tuple[str, tuple[int, ...]]] = [("embed", (cfg.vocab_size, d))]
    if cfg.first is FirstBlockVariant.EMBED_NORM:
        shapes.append(("embed_norm", (d,)))
    width = {"q": hq, "k": hkv, "v": hkv, "c": hq}
    for layer in range(cfg.layers):
        lay = cfg.layout(layer)
        p = f"layers.{layer}."
        shapes += [
            (p + "attn.wq", (d, hq)),
            (p + "attn.wk", (d, hkv)),
            (p + "attn.wv", (d, hkv)),
            (p + "attn.wo", (hq, d)),
        ]
        for key in lay.attn_keys():
            shapes.append((p + f"norm.{key}", (width[key] if cfg.qkv_gain == "per_head" else dk,)))
        if cfg.attn_output_norm:
            shapes.append((p + "norm.attn_extra", (d,)))
        for key in lay.norm_keys():
            shapes.append((p + f"norm.{key}", (d,)))
        shapes += [
            (p + "ffn.gate", (d, f)),
            (p + "ffn.up", (d, f)),
            (p + "ffn.down", (f, d)),
        ]
    shapes.append(("final_norm", (d,)))
    if not cfg.tie_weights:
        shapes.append(("head", (d, cfg.vocab_size)))
    return shapes


class ModelParams:
    """Named float64 tensors of a model, in the fixed checkpoint order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if [n for n, _ in expected] != list(tensors):
            raise ValueError("tensor names/order do not match the configuration")
        for name, shape in expected:
            if tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def head(self) -> np.ndarray:
        """Output projection ``d x vocab``; a transposed view of ``embed`` when tied."""
        if self.config.tie_weights:
            return self.tensors["embed"].T
        return self.tensors["head"]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def layer_names(self, layer: int) -> list[str]:
        prefix = f"layers.{layer}."
        return [n for n in self.tensors if n.startswith(prefix)]

    def count(self, predicate=lambda name: True) -> int:
        return int(sum(v.size for n, v in self.tensors.items() if predicate(n)))

    def layer_norm_param_count(self) -> int:
        """Gains inside the blocks (excludes embedding/final norms)."""
        return self.count(lambda n: n.startswith("layers.") and ".norm." in n)

    def layer_linear_param_count(self) -> int:
        return self.count(lambda n: n.startswith("layers.") and ".norm." not in n)


def trunc_normal(rng: np.random.Generator, shape, std: float, bound: float = 3.0) -> np.ndarray:
    """Normal(0, std) samples resampled until all lie within ``bound`` standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Truncated-normal init with std ``1/sqrt(2.5 d)``; gains start at one.

    DepthScaled divides each layer's attention and FFN output projections by
    ``sqrt(2 l)`` with 1-based ``l``; Megatron divides them by ``sqrt(2 L)``.
    The optional extra attention-output norm starts at ``1/sqrt(2 L)``.
    """
    rng = np.random.default_rng(seed)
    std = 1.0 / math.sqrt(2.5 * config.d_model)
    scheme = config.init_scheme
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config):
        if len(shape) == 1:
            value = np.ones(shape)
            if name.endswith("norm.attn_extra"):
                value /= math.sqrt(2 * config.layers)
        else:
            value = trunc_normal(rng, shape, std)
            if name.endswith("attn.wo") or name.endswith("ffn.down"):
                if scheme is InitScheme.DEPTH_SCALED:
                    layer = int(name.split(".")[1])
                    value /= math.sqrt(2 * (layer + 1))
                elif scheme is InitScheme.MEGATRON:
                    value /= math.sqrt(2 * config.layers)
        tensors[name] = value
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward graph
# ---------------------------------------------------------------------------


def ffn_swiglu(x, gate, up, down):
    """``(silu(x @ gate) * (x @ up)) @ down`` on arrays or graph nodes."""
    if not any(isinstance(t, ag.Var) for t in (x, gate, up, down)):
        x = np.asarray(x, dtype=np.float64)
        z = x @ gate
        return (z / (1.0 + np.exp(-z)) * (x @ up)) @ down
    return ag.silu(ag.matmul(x, gate)) * ag.matmul(x, up) @ down


class _Graph:
    """One forward pass over graph nodes; records traces on request."""

    def __init__(self, cfg: ModelConfig, params: dict[str, ag.Var], trace: dict | None = None):
        self.cfg = cfg
        self.p = params
        self.trace = trace

    def norm(self, x, name):
        return ag.rms_norm(x, self.p[name], self.cfg.norm_eps)

    def head_norm(self, x, name, n_heads):
        gain = self.p[name]
        dk = self.cfg.head_dim
        if gain.shape[0] != dk:
            gain = ag.reshape(gain, (n_heads, 1, dk))
        return ag.rms_norm(x, gain, self.cfg.norm_eps)

    def mha(self, x, layer: int, scheme: AttnNormScheme):
        cfg, p = self.cfg, self.p
        pre = f"layers.{layer}."
        b, s, _ = x.shape
        h, g, dk = cfg.heads, cfg.kv_heads, cfg.head_dim
        q = ag.transpose(ag.reshape(x @ p[pre + "attn.wq"], (b, s, h, dk)), (0, 2, 1, 3))
        k = ag.transpose(ag.reshape(x @ p[pre + "attn.wk"], (b, s, g, dk)), (0, 2, 1, 3))
        v = ag.transpose(ag.reshape(x @ p[pre + "attn.wv"], (b, s, g, dk)), (0, 2, 1, 3))
        if scheme.norm_q:
            q = self.head_norm(q, pre + "norm.q", h)
        if scheme.norm_k:
            k = self.head_norm(k, pre + "norm.k", g)
        if scheme.norm_v:
            v = self.head_norm(v, pre + "norm.v", g)
        if cfg.rope_theta is not None:
            q = ag.rope(q, cfg.rope_theta)
            k = ag.rope(k, cfg.rope_theta)
        k = ag.repeat(k, h // g, axis=1)
        v = ag.repeat(v, h // g, axis=1)
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
        probs = ag.softmax(scores, causal=cfg.causal)
        if self.trace is not None:
            self.trace.setdefault("attn_probs", []).append(probs.value)
        ctx = ag.matmul(probs, v)
        if scheme.norm_c:
            ctx = self.head_norm(ctx, pre + "norm.c", h)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, s, h * dk))
        return ctx @ p[pre + "attn.wo"]

    def ffn(self, x, layer: int):
        pre = f"layers.{layer}.ffn."
        return ffn_swiglu(x, self.p[pre + "gate"], self.p[pre + "up"], self.p[pre + "down"])

    def block(self, x, layer: int, lay: Layout):
        n = f"layers.{layer}.norm."
        h = self.norm(x, n + "attn_in") if lay.pre_attn else x
        a = self.mha(h, layer, lay.attn)
        if self.cfg.attn_output_norm:
            a = self.norm(a, n + "attn_extra")
        if lay.attn_out_norm:
            a = self.norm(a, n + "attn_out")
        y = a + (h if lay.residual_from_norm else x)
        if lay.post_attn:
            y = self.norm(y, n + "attn_post")
        if lay.ffn == "pre":
            out = self.ffn(self.norm(y, n + "ffn_in"), layer) + y
        elif lay.ffn == "hybrid":
            yn = self.norm(y, n + "ffn_in")
            out = self.ffn(yn, layer) + yn
        elif lay.ffn == "post":
            out = self.norm(self.ffn(y, layer) + y, n + "ffn_post")
        else:
            out = y + self.norm(self.ffn(y, layer), n + "ffn_out")
        if self.trace is not None:
            self.trace.setdefault("layer_outputs", []).append(out.value)
        return out

    def embed(self, tokens):
        x = ag.embedding(self.p["embed"], tokens)
        if self.cfg.first is FirstBlockVariant.EMBED_NORM:
            x = self.norm(x, "embed_norm")
        return x

    def layers(self, x, start: int = 0):
        for layer in range(start, self.cfg.layers):
            x = self.block(x, layer, self.cfg.layout(layer))
        return x

    def logits(self, x):
        x = self.norm(x, "final_norm")
        if self.cfg.tie_weights:
            return x @ ag.transpose(self.p["embed"], (1, 0))
        return x @ self.p["head"]


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    t = np.asarray(tokens)
    if t.ndim == 1:
        return t[None, :], True
    if t.ndim != 2:
        raise ValueError("tokens must be a sequence or a batch of sequences")
    return t, False


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    if tokens.shape[1] > cfg.context_length:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds context {cfg.context_length}")


def _leaves(params: ModelParams) -> dict[str, ag.Var]:
    return {name: ag.Var(value, name=name) for name, value in params.items()}


def model_forward(config: ModelConfig, params: ModelParams, tokens, trace: dict | None = None) -> np.ndarray:
    """Logits ``s x vocab`` (or ``batch x s x vocab``) for integer ``tokens``."""
    batch, single = _as_batch(tokens)
    _check_tokens(config, batch)
    g = _Graph(config, _leaves(params), trace)
    out = g.logits(g.layers(g.embed(batch))).value
    return out[0] if single else out


def forward_hidden(config: ModelConfig, params: ModelParams, hidden, start_layer: int = 0) -> np.ndarray:
    """Run blocks ``start_layer..L-1``, the final norm and the head on given hidden states."""
    h = np.asarray(hidden, dtype=np.float64)
    single = h.ndim == 2
    g = _Graph(config, _leaves(params))
    out = g.logits(g.layers(ag.Var(h[None] if single else h), start_layer)).value
    return out[0] if single else out


def block_forward(scheme, x, params: ModelParams, layer: int) -> np.ndarray:
    """Apply the block at ``layer`` of ``params`` to hidden states ``x``.

    ``scheme`` may be a :class:`BlockScheme`, a scheme name or a
    :class:`Layout`; MixLN resolves with the model's depth and split.
    """
    cfg = params.config
    if isinstance(scheme, Layout):
        lay = scheme
    else:
        lay = BlockScheme.parse(scheme).layout(layer, cfg.layers, cfg.mixln_split)
    h = np.asarray(x, dtype=np.float64)
    single = h.ndim == 2
    g = _Graph(cfg, _leaves(params))
    out = g.block(ag.Var(h[None] if single else h), layer, lay).value
    return out[0] if single else out


def loss_and_grads(config: ModelConfig, params: ModelParams, tokens, targets) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy and its exact gradient for every parameter tensor.

    A non-finite loss is returned as is (the caller treats it as divergence);
    no exception is raised.
    """
    if not config.causal:
        raise ValueError("loss_and_grads needs a causal configuration")
    batch, _ = _as_batch(tokens)
    tgt, _ = _as_batch(targets)
    if tgt.shape != batch.shape:
        raise ValueError("targets must have the same shape as tokens")
    _check_tokens(config, batch)
    _check_tokens(config, tgt)
    leaves = _leaves(params)
    g = _Graph(config, leaves)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        loss = ag.cross_entropy(g.logits(g.layers(g.embed(batch))), tgt)
        ag.backward(loss)
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    }
    return float(loss.value), grads
