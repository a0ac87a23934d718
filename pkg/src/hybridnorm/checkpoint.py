"""Binary checkpoints: one JSON header line followed by raw float64 data.

Layout::

    HNCKPT1\\n
    <compact JSON header, keys sorted>\\n
    <little-endian float64 payload>

The header carries the model config, seed, step and the ordered tensor
table ``[[name, shape], ...]``. Optimizer moments, when present, follow
the parameters in the same order (all ``m`` tensors, then all ``v``).
Saving a loaded checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import ModelConfig, ModelParams

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "checkpoint_bytes"]

MAGIC = b"HNCKPT1\n"
_LE = np.dtype("<f8")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    seed: int
    step: int
    opt_t: int | None = None
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    extra: dict | None = None


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params)
    header = {
        "model": ckpt.config.to_dict(),
        "seed": int(ckpt.seed),
        "step": int(ckpt.step),
        "tensors": [[n, list(ckpt.params[n].shape)] for n in names],
        "optimizer": None if ckpt.opt_m is None else {"t": int(ckpt.opt_t or 0)},
        "extra": ckpt.extra or {},
    }
    chunks = [ckpt.params[n] for n in names]
    if ckpt.opt_m is not None:
        chunks += [ckpt.opt_m[n] for n in names] + [ckpt.opt_v[n] for n in names]
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    payload = b"".join(np.ascontiguousarray(c, dtype=_LE).tobytes() for c in chunks)
    return MAGIC + head + b"\n" + payload


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end])
    config = ModelConfig.from_dict(header["model"])
    buf = memoryview(raw)[end + 1:]
    offset = 0

    def take(shape):
        nonlocal offset
        n = math.prod(shape)
        arr = np.frombuffer(buf, dtype=_LE, count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
        return arr

    table = [(n, tuple(s)) for n, s in header["tensors"]]
    params = ModelParams(config, {n: take(s) for n, s in table})
    m = v = t = None
    if header["optimizer"] is not None:
        t = header["optimizer"]["t"]
        m = {n: take(s) for n, s in table}
        v = {n: take(s) for n, s in table}
    if offset != len(buf):
        raise ValueError(f"{path}: payload size mismatch")
    return Checkpoint(config, params, header["seed"], header["step"], t, m, v, header["extra"] or None)
