"""Per-layer gradient norms at initialization for 16-layer toy models.

Prints the seed-averaged profile of each scheme, its Spearman correlation
with depth and the max/min ratio, and writes depth_profile.csv.

    python3 scripts/depth_profile.py --seeds 10 --out runs/depth_profile.csv
"""

from __future__ import annotations

import argparse
import csv

import numpy as np

from hybridnorm.blocks import ModelConfig, init_params
from hybridnorm.diagnostics import derive_seed, per_layer_grad_norms, spearman
from hybridnorm.trainer import _windows, synthetic_dataset


def profile(scheme: str, first: str, init: str, seed: int, layers: int, d: int, ctx: int, batch: int) -> np.ndarray:
    cfg = ModelConfig(layers=layers, d_model=d, heads=4, context_length=ctx, block_scheme=scheme,
                      first_block=first, init=init)
    stream = synthetic_dataset("copy", derive_seed(seed, 5), 4000, cfg.vocab_size)
    data = _windows(stream, np.random.default_rng(derive_seed(seed, 6)), batch, ctx)
    return per_layer_grad_norms(cfg, init_params(cfg, seed), data)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--schemes", nargs="+", default=["PostNorm", "PreNorm", "HybridNorm", "HybridNorm*"])
    ap.add_argument("--init", default="Megatron")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--layers", type=int, default=16)
    ap.add_argument("--d-model", type=int, default=128)
    ap.add_argument("--context", type=int, default=32)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--out", default="depth_profile.csv")
    args = ap.parse_args()

    rows = []
    for label in args.schemes:
        scheme, first = ("HybridNorm", "HybridStar") if label == "HybridNorm*" else (label, "SameAsRest")
        prof = np.array([profile(scheme, first, args.init, s, args.layers, args.d_model, args.context, args.batch)
                         for s in range(args.seeds)])
        mean = prof.mean(axis=0)
        ratio = prof.max(axis=1) / prof.min(axis=1)
        rho = spearman(np.arange(args.layers), mean)
        print(f"{label:12s} spearman(layer, norm) {rho:+.2f}  median max/min {np.median(ratio):6.2f}  "
              f"profile {np.array2string(mean, precision=3, max_line_width=200)}")
        for seed, p in enumerate(prof):
            rows += [(label, args.init, seed, layer, repr(float(v))) for layer, v in enumerate(p)]
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("scheme", "init", "seed", "layer", "grad_norm"))
        w.writerows(rows)


if __name__ == "__main__":
    main()
