#!/usr/bin/env python3
"""Retention experiment: federated (8 silos, aggregate every epoch) vs the
centralized baseline on the default synthetic dataset.

Writes federated.json / centralized.json under --out and prints the per-k
accuracy ratios.  The headline number is the top-1 F-F ratio, expected to
stay above 0.90.
"""

import argparse
import os

from fedgm.orchestrate import ExperimentConfig, run_centralized, run_federated


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--silos", type=int, default=8)
    ap.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    ap.add_argument("--out", default="out/fed_vs_central")
    args = ap.parse_args()

    cfg = ExperimentConfig(
        n_silos=args.silos, aggregation_interval=1,
        repeats=args.repeats, seed=args.seed,
    )
    baseline = run_centralized(cfg)
    report = run_federated(cfg, transport=args.transport, baseline=baseline)

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "centralized.json"), "w") as fh:
        fh.write(baseline.to_json() + "\n")
    with open(os.path.join(args.out, "federated.json"), "w") as fh:
        fh.write(report.to_json() + "\n")

    print(f"{'setting':8s} {'k':>3s} {'central':>9s} {'federated':>10s} {'ratio':>7s}")
    for setting in sorted(report.ratios_vs_baseline):
        for k, ratio in sorted(report.ratios_vs_baseline[setting].items(), key=lambda kv: int(kv[0])):
            c, _ = baseline.accuracy(setting, int(k))
            f, _ = report.accuracy(setting, int(k))
            print(f"{setting:8s} {k:>3s} {c:9.4f} {f:10.4f} {ratio:7.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
