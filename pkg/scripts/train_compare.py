"""Train several schemes on a synthetic task and compare loss curves.

    python3 scripts/train_compare.py --seeds 0 1 --steps 500 --dataset copy
"""

from __future__ import annotations

import argparse

import numpy as np

from hybridnorm.blocks import ModelConfig
from hybridnorm.trainer import TrainConfig, train

PRESETS = {
    "PreNorm": ("PreNorm", "SameAsRest", "Normal"),
    "PostNorm": ("PostNorm", "SameAsRest", "Normal"),
    "HybridNorm": ("HybridNorm", "SameAsRest", "Megatron"),
    "HybridNorm*": ("HybridNorm", "HybridStar", "Megatron"),
    "MixLN": ("MixLN", "SameAsRest", "Normal"),
    "PreQK": ("PreQK", "SameAsRest", "Normal"),
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--schemes", nargs="+", default=["PreNorm", "HybridNorm", "HybridNorm*"], choices=list(PRESETS))
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--d-model", type=int, default=64)
    ap.add_argument("--context", type=int, default=32)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--dataset", default="copy", choices=["copy", "modular-add", "byte-text"])
    args = ap.parse_args()

    for label in args.schemes:
        scheme, first, init = PRESETS[label]
        for seed in args.seeds:
            model = ModelConfig(layers=args.layers, d_model=args.d_model, heads=4, context_length=args.context,
                                block_scheme=scheme, first_block=first, init=init)
            cfg = TrainConfig(model=model, total_steps=args.steps, warmup_steps=min(50, args.steps // 10),
                              lr_peak=args.lr, dataset=args.dataset, seed=seed, eval_interval=max(1, args.steps // 5))
            log = train(cfg)
            loss = log.losses()
            val = log.evals[-1][1] if log.evals else float("nan")
            print(f"{label:12s} seed {seed}: first-10 loss {loss[:10].mean():.3f}  last-10 {loss[-10:].mean():.3f}  "
                  f"val {val:.3f}  diverged_at {log.diverged_at}")


if __name__ == "__main__":
    np.set_printoptions(precision=3)
    main()
