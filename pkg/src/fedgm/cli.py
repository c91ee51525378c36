"""Command-line entry points for data generation, training, evaluation,
queries, the reconstruction-attack demo, and experiment grids.

Configs are JSON files mirroring ExperimentConfig; every command takes
--seed and writes its artifacts under --out.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as data_mod
from . import inference
from .model import load_checkpoint, save_checkpoint
from .orchestrate import (
    ExperimentConfig,
    default_grid,
    fast_profile,
    run_attack_demo,
    run_centralized,
    run_federated,
    run_grid,
    subseed,
)


def _load_config(path: str | None, seed: int | None) -> ExperimentConfig:
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = ExperimentConfig.from_dict(json.load(fh))
    else:
        cfg = ExperimentConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _write_reports(report, out_dir: str, stem: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{stem}.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    rows = report.csv_rows()
    with open(os.path.join(out_dir, f"{stem}.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _export_run_artifacts(report, out_dir: str, stem: str) -> None:
    run = report.runs[0]
    X, labels, ids = run.embeddings
    inference.export_embeddings(
        os.path.join(out_dir, f"{stem}_embeddings.bin"), X, labels, ids
    )
    save_checkpoint(os.path.join(out_dir, f"{stem}_model.ckpt"), run.final_params)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, args.seed)
    records = data_mod.generate_synthetic(cfg.data, subseed(cfg.seed, "data"))
    data_mod.split_dataset(records, cfg.ratios, subseed(cfg.seed, "split"))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "dataset.jsonl")
    data_mod.save_jsonl(path, records)
    counts = data_mod.syndrome_counts(records)
    freq = sum(
        1 for c in counts.values() if data_mod.classify_frequency(c) is data_mod.FrequencyClass.FREQUENT
    )
    print(f"wrote {len(records)} records, {len(counts)} classes "
          f"({freq} frequent) -> {path}")
    return 0


def cmd_partition(args) -> int:
    records = data_mod.load_jsonl(args.data)
    train = [r for r in records if r.split == "train"]
    if args.scheme == "near_uniform":
        part = data_mod.partition_near_uniform(train, args.silos, args.seed)
    elif args.scheme == "non_overlapping":
        part = data_mod.partition_non_overlapping(train, args.silos, args.seed)
    else:
        part = data_mod.partition_dirichlet(train, args.silos, args.alpha, args.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "partition.json")
    data_mod.save_partition(path, part)
    sd = data_mod.class_distribution_sd(part, train)
    print(f"wrote {args.scheme} partition over {args.silos} silos -> {path}")
    print(f"mean class-distribution SD: {np.mean(list(sd.values())):.4f}")
    return 0


def cmd_train_central(args) -> int:
    cfg = _load_config(args.config, args.seed)
    report = run_centralized(cfg)
    _write_reports(report, args.out, "centralized")
    _export_run_artifacts(report, args.out, "centralized")
    for s in sorted(report.runs[0].setting_reports):
        mean, std = report.accuracy(s, 1)
        print(f"{s}: top-1 {mean:.4f} +- {std:.4f}")
    return 0


def cmd_train_fed(args) -> int:
    cfg = _load_config(args.config, args.seed)
    baseline = run_centralized(cfg) if args.with_baseline else None
    report = run_federated(cfg, transport=args.transport, baseline=baseline)
    _write_reports(report, args.out, "federated")
    _export_run_artifacts(report, args.out, "federated")
    for s in sorted(report.runs[0].setting_reports):
        mean, std = report.accuracy(s, 1)
        line = f"{s}: top-1 {mean:.4f} +- {std:.4f}"
        if report.ratios_vs_baseline:
            line += f" (x{report.ratios_vs_baseline[s]['1']:.3f} of centralized)"
        print(line)
    return 0


def cmd_evaluate(args) -> int:
    """Re-evaluate a saved dataset with a saved model checkpoint, in plaintext."""
    from .model import EncoderConfig, EnsembleModel, init_ensemble, unflatten_ensemble
    from .core import derive_rng
    from .orchestrate import _evaluate_plaintext

    cfg = _load_config(args.config, args.seed)
    records = data_mod.load_jsonl(args.data)
    flat = load_checkpoint(args.checkpoint)
    skeleton = init_ensemble(
        cfg.encoder_config(), cfg.n_members, derive_rng(0, "evaluate/skeleton")
    )
    ensemble = unflatten_ensemble(flat, skeleton)
    reports, cluster, _ = _evaluate_plaintext(cfg, ensemble, records, cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "evaluation.json")
    doc = {
        "settings": {s: json.loads(r.to_json()) for s, r in reports.items()},
        "cluster": {scope: {"intra": v[0], "inter": v[1]} for scope, v in cluster.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    rows = [row for r in reports.values() for row in r.csv_rows()]
    with open(os.path.join(args.out, "evaluation.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    for s in sorted(reports):
        print(f"{s}: top-1 {reports[s].topk_acc[1]:.4f} (n={reports[s].n_test})")
    return 0


def cmd_query(args) -> int:
    """Run the masked query flow for one patient against a saved model + dataset."""
    from .core import derive_rng
    from .model import init_ensemble, unflatten_ensemble
    from .orchestrate import masked_query

    cfg = _load_config(args.config, args.seed)
    if args.query_id is None and not args.features:
        print("need --query-id or --features", file=sys.stderr)
        return 2
    records = data_mod.load_jsonl(args.data)
    flat = load_checkpoint(args.checkpoint)
    skeleton = init_ensemble(
        cfg.encoder_config(), cfg.n_members, derive_rng(0, "query/skeleton")
    )
    ensemble = unflatten_ensemble(flat, skeleton)
    if args.query_id is not None:
        by_id = {r.id: r for r in records}
        features = by_id[args.query_id].features
        truth = by_id[args.query_id].syndrome
    else:
        features = np.array([float(v) for v in args.features.split(",")])
        truth = None
    ranked = masked_query(cfg, ensemble, records, features, args.k, shared_seed=cfg.seed)
    doc = {
        "k": args.k,
        "true_syndrome": truth,
        "ranked": [{"syndrome": s, "distance": d} for s, d in ranked],
    }
    print(json.dumps(doc, indent=2))
    return 0


def cmd_attack_demo(args) -> int:
    cfg = _load_config(args.config, args.seed)
    report, (originals, reconstructions) = run_attack_demo(cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "attack_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    if args.dump_csv:
        path = os.path.join(args.out, "reconstructions.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            dim = originals.shape[1]
            writer.writerow([f"in_{i}" for i in range(dim)] + [f"rec_{i}" for i in range(dim)])
            for orig, rec in zip(originals, reconstructions):
                writer.writerow(list(orig) + list(rec))
    print(f"reconstruction rel_mse: {report['rel_mse']:.4f} (baseline 1.0)")
    return 0


def cmd_grid(args) -> int:
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
        configs = [ExperimentConfig.from_dict(d) for d in doc]
        if args.seed is not None:
            configs = [replace(c, seed=args.seed) for c in configs]
    else:
        configs = default_grid(fast_profile(args.seed or 0))
    outcomes = run_grid(configs, args.out, transport=args.transport)
    ok = sum(1 for o in outcomes if o["status"] == "ok")
    print(f"grid: {ok}/{len(outcomes)} configs succeeded; summary in {args.out}/summary.csv")
    return 0 if ok == len(outcomes) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fedgm",
        description="Federated syndrome retrieval: training, masked inference, evaluation.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="out"):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("gen-data", help="generate and split a synthetic dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("partition", help="partition a dataset's train split across silos")
    sp.add_argument("--data", required=True, help="dataset.jsonl path")
    sp.add_argument("--scheme", choices=["near_uniform", "non_overlapping", "dirichlet"],
                    default="near_uniform")
    sp.add_argument("--silos", type=int, default=8)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="out")
    sp.set_defaults(func=cmd_partition)

    sp = sub.add_parser("train-central", help="train and evaluate the centralized baseline")
    common(sp)
    sp.set_defaults(func=cmd_train_central)

    sp = sub.add_parser("train-fed", help="run the full federated session")
    common(sp)
    sp.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    sp.add_argument("--with-baseline", action="store_true",
                    help="also run the centralized baseline and report ratios")
    sp.set_defaults(func=cmd_train_fed)

    sp = sub.add_parser("evaluate", help="evaluate a saved checkpoint on a saved dataset")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("query", help="masked top-k query for one patient")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset.jsonl path")
    sp.add_argument("--checkpoint", required=True, help="saved model checkpoint")
    sp.add_argument("--query-id", type=int, default=None, help="patient id from the dataset")
    sp.add_argument("--features", default=None, help="comma-separated feature vector")
    sp.add_argument("--k", type=int, default=5)
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("attack-demo", help="reconstruction attack on plaintext latents")
    common(sp)
    sp.add_argument("--dump-csv", action="store_true",
                    help="write side-by-side input/reconstruction vectors")
    sp.set_defaults(func=cmd_attack_demo)

    sp = sub.add_parser("grid", help="run an experiment grid and write summary.csv")
    common(sp)
    sp.add_argument("--transport", choices=["inproc", "tcp"], default="inproc")
    sp.set_defaults(func=cmd_grid)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
