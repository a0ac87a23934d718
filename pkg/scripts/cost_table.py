"""Normalization parameter and FLOP shares for a range of model sizes.

    python3 scripts/cost_table.py --d 768 1536 4096 --s 4096 --layers 16
"""

from __future__ import annotations

import argparse

from hybridnorm.diagnostics import cost_report


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d", nargs="+", type=int, default=[768, 1536, 3072])
    ap.add_argument("--s", type=int, default=4096)
    ap.add_argument("--layers", type=int, default=16)
    args = ap.parse_args()
    print(f"{'scheme':10s} {'d':>6s} {'norm params':>12s} {'param share':>12s} {'flops ratio':>14s} {'model check':>11s}")
    for d in args.d:
        for scheme in ("PreNorm", "HybridNorm"):
            r = cost_report(scheme, d, args.s, args.layers)
            check = {True: "ok", False: "MISMATCH", None: "skipped"}[r.model_matches]
            print(f"{scheme:10s} {d:6d} {r.norm_params:12d} {float(r.param_ratio):12.3e} "
                  f"{str(r.flops_ratio):>9s}={float(r.flops_ratio):.2e} {check:>11s}")


if __name__ == "__main__":
    main()
