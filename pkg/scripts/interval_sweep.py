#!/usr/bin/env python3
"""Aggregation-interval sweep: how much local-model divergence costs.

Fixes 8 silos and 50 total epochs, varies the aggregation interval over
{1, 5, 10, 25, 50} (i.e. 50, 10, 5, 2, 1 aggregations), and prints top-1 /
top-30 accuracy per test-gallery setting.  Larger intervals let local models
drift before averaging; accuracy is expected to degrade.
"""

import argparse
import os
from dataclasses import replace

from fedgm.orchestrate import ExperimentConfig, run_federated

INTERVALS = (1, 5, 10, 25, 50)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--scheme", choices=["near_uniform", "non_overlapping"],
                    default="near_uniform")
    ap.add_argument("--out", default="out/interval_sweep")
    args = ap.parse_args()

    base = ExperimentConfig(
        n_silos=8, scheme=args.scheme, repeats=args.repeats, seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    results = {}
    for interval in INTERVALS:
        report = run_federated(replace(base, aggregation_interval=interval))
        results[interval] = report
        with open(os.path.join(args.out, f"interval_{interval:02d}.json"), "w") as fh:
            fh.write(report.to_json() + "\n")

    for k in (1, 30):
        print(f"\ntop-{k} accuracy ({args.scheme}, mean over {args.repeats} repeats)")
        header = "setting " + "".join(f"{f'E={e}':>9s}" for e in INTERVALS)
        print(header)
        for setting in ("FF", "RR", "FFR", "RFR"):
            cells = "".join(
                f"{results[e].accuracy(setting, k)[0]:9.4f}" for e in INTERVALS
            )
            print(f"{setting:8s}{cells}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
