"""Straight-line reference implementations written directly from the block formulas.

They share no code with the package beyond reading parameter arrays.
"""

from __future__ import annotations

import math

import numpy as np


def norm(x, gain=None, eps=0.0):
    out = x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return out if gain is None else out * gain


def softmax(m):
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def rope(x, theta):
    s, dk = x.shape
    z = x[:, 0::2] + 1j * x[:, 1::2]
    z = z * np.exp(1j * np.arange(s)[:, None] * (theta ** (-np.arange(0, dk, 2) / dk))[None, :])
    out = np.empty_like(x)
    out[:, 0::2], out[:, 1::2] = z.real, z.imag
    return out


def mha(x, P, layer, attn: str, cfg):
    """``attn`` is the attention scheme name, e.g. ``"QKV"`` or ``"Vanilla"``."""
    p = f"layers.{layer}."
    s = x.shape[0]
    h, g, dk = cfg.heads, cfg.kv_heads, cfg.d_model // cfg.heads
    eps = cfg.norm_eps

    def gain(key, idx):
        a = P[p + "norm." + key]
        return a if a.size == dk else a[idx * dk:(idx + 1) * dk]

    nq, nk = "Q" in attn, "K" in attn
    nv = attn in ("KV", "QKV", "QKVC")
    nc = attn.endswith("C")
    heads = []
    for i in range(h):
        j = i // (h // g)
        q = x @ P[p + "attn.wq"][:, i * dk:(i + 1) * dk]
        k = x @ P[p + "attn.wk"][:, j * dk:(j + 1) * dk]
        v = x @ P[p + "attn.wv"][:, j * dk:(j + 1) * dk]
        if nq:
            q = norm(q, gain("q", i), eps)
        if nk:
            k = norm(k, gain("k", j), eps)
        if nv:
            v = norm(v, gain("v", j), eps)
        if cfg.rope_theta is not None:
            q, k = rope(q, cfg.rope_theta), rope(k, cfg.rope_theta)
        m = q @ k.T / math.sqrt(dk)
        if cfg.causal:
            m = np.where(np.tril(np.ones((s, s))) > 0, m, -np.inf)
        c = softmax(m) @ v
        if nc:
            c = norm(c, gain("c", i), eps)
        heads.append(c)
    out = np.concatenate(heads, axis=1) @ P[p + "attn.wo"]
    if cfg.attn_output_norm:
        out = norm(out, P[p + "norm.attn_extra"], eps)
    return out


def ffn(x, P, layer):
    p = f"layers.{layer}.ffn."
    z = x @ P[p + "gate"]
    return (z / (1 + np.exp(-z)) * (x @ P[p + "up"])) @ P[p + "down"]


def block(name: str, x, P, layer, cfg):
    """One block for a scheme name: PostNorm, PreNorm, PrePost, PostPre, OutputNorm,
    or a template ``<attn>-Post``, ``<attn>-Pre``, ``Pre-<attn>-Post``, ``Pre-<attn>-Pre``."""
    eps = cfg.norm_eps
    n = f"layers.{layer}.norm."

    def N(t, key):
        return norm(t, P[n + key], eps)

    def F(t):
        return ffn(t, P, layer)

    if name == "PostNorm":
        y = N(mha(x, P, layer, "Vanilla", cfg) + x, "attn_post")
        return N(F(y) + y, "ffn_post")
    if name == "PreNorm":
        y = mha(N(x, "attn_in"), P, layer, "Vanilla", cfg) + x
        return F(N(y, "ffn_in")) + y
    if name == "PrePost":
        y = mha(N(x, "attn_in"), P, layer, "Vanilla", cfg) + x
        return F(N(y, "ffn_in")) + N(y, "ffn_in")
    if name == "PostPre":
        xn = N(x, "attn_in")
        y = mha(xn, P, layer, "Vanilla", cfg) + xn
        return F(N(y, "ffn_in")) + y
    if name == "OutputNorm":
        y = N(mha(x, P, layer, "Vanilla", cfg), "attn_out") + x
        return y + N(F(y), "ffn_out")
    parts = name.split("-")
    pre = parts[0] == "Pre"
    attn, tail = (parts[1], parts[2]) if pre else (parts[0], parts[1])
    y = mha(N(x, "attn_in") if pre else x, P, layer, attn, cfg) + x
    if tail == "Post":
        return F(N(y, "ffn_in")) + N(y, "ffn_in")
    return F(N(y, "ffn_in")) + y


ALIASES = {"HybridNorm": "QKV-Post", "PreQK": "Pre-QK-Pre", "Pre-Post": "PrePost", "Post-Pre": "PostPre", "Mix-LN": "MixLN"}


def layer_scheme(cfg, layer: int) -> str:
    if layer == 0 and cfg.first_block == "HybridStar":
        return "Pre-QKV-Pre"
    if layer == 0 and cfg.first_block == "FirstQKVPre":
        return "QKV-Pre"
    name = ALIASES.get(cfg.block_scheme, cfg.block_scheme)
    if name == "MixLN":
        return "PostNorm" if layer < math.floor(cfg.mixln_split * cfg.layers) else "PreNorm"
    return name


def model_logits(cfg, P, tokens):
    x = P["embed"][np.asarray(tokens)]
    if cfg.first_block == "EmbedNorm":
        x = norm(x, P["embed_norm"], cfg.norm_eps)
    for layer in range(cfg.layers):
        x = block(layer_scheme(cfg, layer), x, P, layer, cfg)
    x = norm(x, P["final_norm"], cfg.norm_eps)
    head = P["embed"].T if cfg.tie_weights else P["head"]
    return x @ head
