"""Random-instance check of the attention weight-gradient bounds.

Reports, per variant, the violations of the bounds as printed and of the
corrected bounds, the largest measured/bound ratio per weight, and the
W_K coupling ratio of the query-weight bound.

    python3 scripts/bound_campaign.py --trials 300
"""

from __future__ import annotations

import argparse

from hybridnorm.attention import BOUND_VARIANTS
from hybridnorm.diagnostics import bound_campaign


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scale", type=float, default=5.0)
    args = ap.parse_args()
    dims = [(3, 4, 2), (5, 8, 4), (6, 8, 8)]
    for v in BOUND_VARIANTS:
        c = bound_campaign(v, args.trials, dims, args.seed, coupling_scale=args.scale)
        print(f"{v}: {c.checks} checks, corrected violations {c.violations}, printed violations "
              f"{c.printed_violations}, vacuous {c.vacuous}")
        for w in ("WQ", "WK", "WV", "WO"):
            print(f"    d/d{w}: max slack corrected {c.max_slack.get(w, float('nan')):.3f}  "
                  f"printed {c.printed_max_slack.get(w, float('nan')):.3f}")
        print(f"    W_K x{args.scale:g} scales the W_Q bound by {c.coupling_wq:.6g} "
              f"(printed form {c.printed_coupling_wq:.6g})")


if __name__ == "__main__":
    main()
