"""Experiment runner: centralized baseline, federated runs, and sweep grids.

A run is fully determined by (config, master seed): data generation, splits,
partitioning, model init, batch shuffling, masking, and reporting all derive
their streams from it.  The centralized runner is the plaintext oracle: it
trains the same ensemble on pooled data with the identical seed streams and
applies the same fixed-point round trip at every aggregation boundary, so an
N=1 federated session reproduces it bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import threading
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data as data_mod
from . import flake, inference
from .attack import DecoderConfig, reconstruction_report, train_decoder
from .core import ParamVec, decode_fixed, derive_rng, encode_fixed
from .data import SplitRatios, SyntheticConfig
from .model import (
    EncoderConfig,
    EnsembleModel,
    ensemble_embed,
    flatten_ensemble,
    init_ensemble,
    train_local,
    unflatten_ensemble,
)
from .net.aggregator import Aggregator, AggregatorServer, SessionConfig
from .net.silo import SiloClient, TrainingPlan
from .net.transport import connect_tcp, inproc_pair

SCHEMES = ("near_uniform", "non_overlapping", "dirichlet")
TRANSPORTS = ("inproc", "tcp")


def subseed(master: int, tag: str) -> int:
    """Stable 63-bit sub-seed for one purpose within a run."""
    digest = hashlib.blake2b(f"{master}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    ratios: SplitRatios = field(default_factory=SplitRatios)
    hidden_dims: tuple[int, ...] = (64,)
    embed_dim: int = 64
    activation: str = "relu"
    loss: str = "softmax"
    margin: float = 0.2
    logit_scale: float = 16.0
    n_silos: int = 8
    aggregation_interval: int = 1  # local epochs between aggregations (E)
    total_epochs: int = 50
    scheme: str = "near_uniform"
    alpha: float | None = None
    n_members: int = 2
    lr: float = 0.12
    batch_size: int = 32
    scale_bits: int = 24
    flake_extra_dims: int = 16
    k_list: tuple[int, ...] = inference.TOPK_DEFAULT
    repeats: int = 5
    seed: int = 0
    subgroup_threshold: float | None = None
    subgroup_min_size: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        object.__setattr__(self, "k_list", tuple(self.k_list))
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.scheme == "dirichlet" and (self.alpha is None or self.alpha <= 0):
            raise ValueError("dirichlet scheme needs alpha > 0")
        if self.total_epochs % self.aggregation_interval != 0:
            raise ValueError("aggregation_interval must divide total_epochs")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    @property
    def rounds(self) -> int:
        return self.total_epochs // self.aggregation_interval

    def num_classes(self) -> int:
        # total syndrome count, agreed system-wide (frequent + rare)
        return self.data.num_frequent_classes + self.data.num_rare_classes

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            input_dim=self.data.input_dim,
            hidden_dims=self.hidden_dims,
            embed_dim=self.embed_dim,
            num_classes=self.num_classes(),
            activation=self.activation,
            loss=self.loss,
            margin=self.margin,
            scale=self.logit_scale,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = asdict(self.data)
        d["ratios"] = asdict(self.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "data" in d:
            d["data"] = SyntheticConfig(**d["data"])
        if "ratios" in d:
            d["ratios"] = SplitRatios(**d["ratios"])
        for key in ("hidden_dims", "k_list"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def prepare_records(cfg: ExperimentConfig, run_seed: int) -> list[data_mod.PatientRecord]:
    """Generate, split, and partition one run's dataset deterministically."""
    records = data_mod.generate_synthetic(cfg.data, subseed(run_seed, "data"))
    data_mod.split_dataset(records, cfg.ratios, subseed(run_seed, "split"))
    train = [r for r in records if r.split == "train"]
    pseed = subseed(run_seed, "partition")
    if cfg.scheme == "near_uniform":
        part = data_mod.partition_near_uniform(train, cfg.n_silos, pseed)
    elif cfg.scheme == "non_overlapping":
        part = data_mod.partition_non_overlapping(train, cfg.n_silos, pseed)
    else:
        part = data_mod.partition_dirichlet(train, cfg.n_silos, cfg.alpha, pseed)
    data_mod.apply_partition(records, part)
    data_mod.assign_remaining_silos(records, cfg.n_silos, subseed(run_seed, "remaining"))
    return records


@dataclass
class SingleRun:
    mode: str
    seed: int
    setting_reports: dict[str, inference.EvalReport]
    cluster: dict[str, tuple[float, float]]
    final_params: ParamVec
    embeddings: tuple[np.ndarray, np.ndarray, np.ndarray]  # mean latents, labels, ids
    wall_time_s: float
    subgroups: list[dict] = field(default_factory=list)

    def param_digest(self) -> str:
        return hashlib.blake2b(
            self.final_params.values.tobytes(), digest_size=16
        ).hexdigest()


def _evaluate_plaintext(
    cfg: ExperimentConfig,
    ensemble: EnsembleModel,
    records: list[data_mod.PatientRecord],
    seed: int,
) -> tuple[dict, dict, tuple]:
    """Plaintext evaluation path shared by the centralized oracle."""
    rows = sorted(
        (r for r in records if r.split in ("gallery", "test")), key=lambda r: r.id
    )
    feats = np.array([r.features for r in rows])
    labels = np.array([r.syndrome for r in rows], dtype=np.int64)
    ids = np.array([r.id for r in rows], dtype=np.int64)
    freq_map = data_mod.frequency_by_class(records)
    splits = np.array([r.split for r in rows])
    freq = np.array([freq_map[r.syndrome].value for r in rows])
    members = ensemble_embed(ensemble, feats)
    dists = [flake.plaintext_distance_matrix(Z, labels, ids) for Z in members]
    D = flake.ensemble_distance(dists)
    reports = inference.evaluate_all_settings(D, splits, freq, cfg.k_list, seed)
    cluster = {
        "test": inference.cluster_metrics(D, np.flatnonzero(splits == "test")),
        "rare_gallery": inference.cluster_metrics(
            D, np.flatnonzero((splits == "gallery") & (freq == "rare"))
        ),
    }
    mean_latents = np.mean(members, axis=0)
    return reports, cluster, (mean_latents, labels, ids)


def run_once_centralized(cfg: ExperimentConfig, run_seed: int) -> SingleRun:
    """Train on pooled data with the same seed streams and quantization schedule
    as a federated session, then evaluate in plaintext."""
    t0 = time.monotonic()
    records = prepare_records(cfg, run_seed)
    train = [r for r in records if r.split == "train"]
    feats = np.array([r.features for r in train])
    labels = np.array([r.syndrome for r in train], dtype=np.int64)
    shared_seed = subseed(run_seed, "session")
    enc = cfg.encoder_config()
    ensemble = init_ensemble(enc, cfg.n_members, derive_rng(shared_seed, "init"))
    train_rngs = [
        derive_rng(shared_seed, f"train/silo=1/member={m}")
        for m in range(cfg.n_members)
    ]
    for _ in range(cfg.rounds):
        members = []
        for m, (mcfg, params) in enumerate(ensemble.members):
            params = train_local(
                params, mcfg, feats, labels,
                epochs=cfg.aggregation_interval, lr=cfg.lr,
                batch_size=cfg.batch_size, rng=train_rngs[m],
            )
            members.append((mcfg, params))
        ensemble = EnsembleModel(tuple(members))
        # same fixed-point grid the protocol puts global models on
        flat = flatten_ensemble(ensemble)
        flat = decode_fixed(encode_fixed(flat, cfg.scale_bits), divisor=1)
        ensemble = unflatten_ensemble(flat, ensemble)
    reports, cluster, embeddings = _evaluate_plaintext(cfg, ensemble, records, run_seed)
    return SingleRun(
        mode="centralized",
        seed=run_seed,
        setting_reports=reports,
        cluster=cluster,
        final_params=flatten_ensemble(ensemble),
        embeddings=embeddings,
        wall_time_s=time.monotonic() - t0,
    )


def run_once_federated(
    cfg: ExperimentConfig, run_seed: int, transport: str = "inproc"
) -> SingleRun:
    """One full federated session over the chosen transport."""
    if transport not in TRANSPORTS:
        raise ValueError(f"transport must be one of {TRANSPORTS}")
    t0 = time.monotonic()
    records = prepare_records(cfg, run_seed)
    shared_seed = subseed(run_seed, "session")
    session = SessionConfig(
        session_id=f"fedgm-{run_seed}",
        n_silos=cfg.n_silos,
        rounds=cfg.rounds,
        scale_bits=cfg.scale_bits,
        k_list=cfg.k_list,
        subgroup_threshold=cfg.subgroup_threshold,
        subgroup_min_size=cfg.subgroup_min_size,
    )
    plan = TrainingPlan(
        model=cfg.encoder_config(),
        n_members=cfg.n_members,
        epochs_per_round=cfg.aggregation_interval,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        flake_extra_dims=cfg.flake_extra_dims,
    )
    agg = Aggregator(session)
    server = AggregatorServer(agg)
    clients = []
    for i in range(1, cfg.n_silos + 1):
        local = [r for r in records if r.silo == i - 1]
        clients.append(SiloClient(session, plan, i, shared_seed, local, records))

    conns = []
    if transport == "tcp":
        from .net.transport import DEFAULT_PORT

        bind = os.environ.get("FEDGM_BIND", f"127.0.0.1:{DEFAULT_PORT}")
        host, _, port = bind.partition(":")
        host, port = _resolve_bind(host, port)
        addr = server.listen_tcp(host, port)
        for _ in clients:
            conns.append(connect_tcp(addr[0], addr[1]))
    else:
        for _ in clients:
            silo_end, agg_end = inproc_pair()
            server.spawn(agg_end)
            conns.append(silo_end)

    errors: list[BaseException] = []

    def run_client(client: SiloClient, conn) -> None:
        try:
            client.run(conn)
        except BaseException as exc:  # surface thread failures to the caller
            errors.append(exc)
            agg.abort(f"silo {client.silo_index} failed: {exc}")

    threads = [
        threading.Thread(target=run_client, args=(c, conn), daemon=True)
        for c, conn in zip(clients, conns)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    try:
        if errors:
            raise RuntimeError(f"federated session failed: {errors[0]}") from errors[0]
        agg.wait_ready()
        reports = agg.evaluation_reports(run_seed)
        cluster = agg.cluster_report()
        subgroups = agg.subgroups
    finally:
        for conn in conns:
            conn.close()
        server.close()
    final = clients[0].result.final_params
    # all silos must hold the identical global model
    for c in clients[1:]:
        if not np.array_equal(c.result.final_params.values, final.values):
            raise RuntimeError("silos disagree on the final global model")
    order = np.argsort(np.concatenate([c.result.uploaded_ids for c in clients]))
    pooled_latents = np.concatenate(
        [np.mean(c.result.plain_embeddings, axis=0) for c in clients]
    )[order]
    ids = np.concatenate([c.result.uploaded_ids for c in clients])[order]
    labels_by_id = {r.id: r.syndrome for r in records}
    labels = np.array([labels_by_id[i] for i in ids], dtype=np.int64)
    return SingleRun(
        mode="federated",
        seed=run_seed,
        setting_reports=reports,
        cluster=cluster,
        final_params=final,
        embeddings=(pooled_latents, labels, ids),
        wall_time_s=time.monotonic() - t0,
        subgroups=subgroups,
    )


def _resolve_bind(host: str, port: str) -> tuple[str, int]:
    return host or "127.0.0.1", int(port or 0)


@dataclass
class RunReport:
    mode: str
    config: dict
    runs: list[SingleRun]
    ratios_vs_baseline: dict | None = None

    @property
    def repeats(self) -> int:
        return len(self.runs)

    def accuracy(self, setting: str, k: int) -> tuple[float, float]:
        vals = [r.setting_reports[setting].topk_acc[k] for r in self.runs]
        return float(np.mean(vals)), float(np.std(vals))

    def cluster(self, scope: str) -> dict[str, tuple[float, float]]:
        intra = [r.cluster[scope][0] for r in self.runs]
        inter = [r.cluster[scope][1] for r in self.runs]
        return {
            "intra": (float(np.mean(intra)), float(np.std(intra))),
            "inter": (float(np.mean(inter)), float(np.std(inter))),
        }

    def to_dict(self, include_wall_time: bool = True) -> dict:
        settings = sorted(self.runs[0].setting_reports)
        k_list = sorted(self.runs[0].setting_reports[settings[0]].topk_acc)
        doc = {
            "mode": self.mode,
            "config": self.config,
            "repeats": self.repeats,
            "seeds": [r.seed for r in self.runs],
            "accuracy": {
                s: {
                    str(k): {
                        "mean": self.accuracy(s, k)[0],
                        "std": self.accuracy(s, k)[1],
                        "per_repeat": [r.setting_reports[s].topk_acc[k] for r in self.runs],
                    }
                    for k in k_list
                }
                for s in settings
            },
            "cluster": {
                scope: {
                    key: {"mean": stats[0], "std": stats[1]}
                    for key, stats in self.cluster(scope).items()
                }
                for scope in sorted(self.runs[0].cluster)
            },
            "n_test": {s: self.runs[0].setting_reports[s].n_test for s in settings},
            "final_param_digests": [r.param_digest() for r in self.runs],
        }
        if self.ratios_vs_baseline is not None:
            doc["ratio_vs_centralized"] = self.ratios_vs_baseline
        if include_wall_time:
            doc["wall_time_s"] = float(sum(r.wall_time_s for r in self.runs))
        return doc

    def to_json(self, include_wall_time: bool = True) -> str:
        return json.dumps(self.to_dict(include_wall_time), indent=2, sort_keys=True)

    def csv_rows(self) -> list[dict]:
        cfg = self.config
        rows = []
        settings = sorted(self.runs[0].setting_reports)
        for s in settings:
            for k in sorted(self.runs[0].setting_reports[s].topk_acc):
                mean, std = self.accuracy(s, k)
                rows.append({
                    "mode": self.mode,
                    "scheme": cfg.get("scheme"),
                    "n_silos": cfg.get("n_silos"),
                    "aggregation_interval": cfg.get("aggregation_interval"),
                    "alpha": cfg.get("alpha"),
                    "setting": s,
                    "k": k,
                    "accuracy_mean": mean,
                    "accuracy_std": std,
                    "n_test": self.runs[0].setting_reports[s].n_test,
                    "repeats": self.repeats,
                    "seed": cfg.get("seed"),
                })
        return rows


def _repeat_seeds(cfg: ExperimentConfig) -> list[int]:
    return [subseed(cfg.seed, f"repeat={i}") for i in range(cfg.repeats)]


def run_centralized(cfg: ExperimentConfig) -> RunReport:
    runs = [run_once_centralized(cfg, s) for s in _repeat_seeds(cfg)]
    return RunReport(mode="centralized", config=cfg.to_dict(), runs=runs)


def run_federated(
    cfg: ExperimentConfig,
    transport: str = "inproc",
    baseline: RunReport | None = None,
) -> RunReport:
    runs = [run_once_federated(cfg, s, transport) for s in _repeat_seeds(cfg)]
    report = RunReport(mode="federated", config=cfg.to_dict(), runs=runs)
    if baseline is not None:
        ratios = {}
        for s in sorted(runs[0].setting_reports):
            ratios[s] = {}
            for k in sorted(runs[0].setting_reports[s].topk_acc):
                base_mean, _ = baseline.accuracy(s, k)
                fed_mean, _ = report.accuracy(s, k)
                ratios[s][str(k)] = fed_mean / base_mean if base_mean > 0 else math.inf
        report.ratios_vs_baseline = ratios
    return report


def run_attack_demo(
    cfg: ExperimentConfig,
    seed: int | None = None,
    decoder_hidden: tuple[int, ...] = (64,),
    epochs: int = 150,
    lr: float = 0.02,
) -> dict:
    """Train the reconstruction decoder on train+val latents, score on test.

    Operates entirely on plaintext latents, i.e. on the naive protocol this
    system exists to avoid; masked rows never enter this path.
    """
    run_seed = cfg.seed if seed is None else seed
    records = prepare_records(cfg, run_seed)
    central = run_once_centralized(cfg, run_seed)
    enc = cfg.encoder_config()
    ensemble = unflatten_ensemble(
        central.final_params,
        init_ensemble(enc, cfg.n_members, derive_rng(subseed(run_seed, "session"), "init")),
    )
    mcfg, params = ensemble.members[0]  # one member suffices for the demo
    fit_rows = [r for r in records if r.split in ("train", "val")]
    test_rows = [r for r in records if r.split == "test"]
    from .model import embed as model_embed

    fit_feats = np.array([r.features for r in fit_rows])
    test_feats = np.array([r.features for r in test_rows])
    fit_latents = model_embed(params, mcfg, fit_feats)
    test_latents = model_embed(params, mcfg, test_feats)
    dcfg = DecoderConfig(
        embed_dim=enc.embed_dim,
        hidden_dims=decoder_hidden,
        output_dim=cfg.data.input_dim,
    )
    decoder, history = train_decoder(
        fit_latents, fit_feats, dcfg,
        epochs=epochs, lr=lr, seed=subseed(run_seed, "attack"),
    )
    report = reconstruction_report(decoder, dcfg, test_latents, test_feats)
    report.update({
        "n_fit": len(fit_rows),
        "final_train_mse": history[-1],
        "seed": run_seed,
    })
    from .attack import decode as decoder_forward

    reconstructions = decoder_forward(decoder, dcfg, test_latents)
    return report, (test_feats, reconstructions)


def masked_query(
    cfg: ExperimentConfig,
    ensemble: EnsembleModel,
    records: list[data_mod.PatientRecord],
    features: np.ndarray,
    k: int,
    shared_seed: int,
) -> list[tuple[int, float]]:
    """One masked query against the gallery rows, without a running server.

    The gallery holder and the querying silo use different left inverses, as
    they would in a session; the ranking is invariant to that choice.
    """
    gallery = sorted((r for r in records if r.split == "gallery"), key=lambda r: r.id)
    feats = np.array([r.features for r in gallery])
    labels = np.array([r.syndrome for r in gallery], dtype=np.int64)
    ids = np.array([r.id for r in gallery], dtype=np.int64)
    common = flake.gen_common_mask(
        shared_seed, cfg.embed_dim, cfg.embed_dim + cfg.flake_extra_dims
    )
    l_gallery = flake.sample_left_inverse(
        common, derive_rng(shared_seed, "flake/left-inverse/silo=1")
    )
    l_query = flake.sample_left_inverse(
        common, derive_rng(shared_seed, "flake/left-inverse/query")
    )
    query = np.atleast_2d(np.asarray(features, dtype=np.float64))
    member_D = []
    for mcfg, params in ensemble.members:
        from .model import embed as model_embed

        gal_masked = flake.mask_embeddings(
            model_embed(params, mcfg, feats), l_gallery, labels, ids, 1
        )
        q_masked = model_embed(params, mcfg, query) @ l_query.L
        block, qdiag = flake.cross_gram(common.K, q_masked, gal_masked.rows)
        gdiag = np.einsum("ij,ij->i", gal_masked.rows @ common.K, gal_masked.rows)
        member_D.append(1.0 - block / np.outer(np.sqrt(qdiag), np.sqrt(gdiag)))
    fused = np.mean(member_D, axis=0)
    return inference.rank_distinct_syndromes(fused[0], labels, k)


def run_grid(
    configs: list[ExperimentConfig],
    out_dir: str,
    transport: str = "inproc",
    with_baseline: bool = False,
) -> list[dict]:
    """Run every config, write one report per config plus a summary CSV.

    A failing config is recorded and the grid continues.
    """
    os.makedirs(out_dir, exist_ok=True)
    summary_rows = []
    outcomes = []
    for idx, cfg in enumerate(configs):
        name = (
            f"{idx:03d}_{cfg.scheme}_N{cfg.n_silos}_E{cfg.aggregation_interval}"
            + (f"_a{cfg.alpha}" if cfg.alpha is not None else "")
        )
        try:
            baseline = run_centralized(cfg) if with_baseline else None
            report = run_federated(cfg, transport, baseline)
            path = os.path.join(out_dir, f"{name}.json")
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(report.to_json() + "\n")
            summary_rows.extend(report.csv_rows())
            outcomes.append({"config": name, "status": "ok", "report": path})
        except Exception as exc:
            outcomes.append({"config": name, "status": "failed", "error": str(exc)})
    summary_path = os.path.join(out_dir, "summary.csv")
    fieldnames = [
        "mode", "scheme", "n_silos", "aggregation_interval", "alpha",
        "setting", "k", "accuracy_mean", "accuracy_std", "n_test", "repeats", "seed",
    ]
    with open(summary_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(summary_rows)
    with open(os.path.join(out_dir, "grid_outcomes.json"), "w", encoding="utf-8") as fh:
        json.dump(outcomes, fh, indent=2)
    return outcomes


def default_grid(cfg: ExperimentConfig | None = None) -> list[ExperimentConfig]:
    """The sweep mirroring the reference experiments: silo counts for the
    near-uniform scheme, aggregation intervals, and Dirichlet concentrations."""
    base = cfg or fast_profile()
    grid: list[ExperimentConfig] = []
    for n in (4, 8, 16):
        grid.append(replace(base, n_silos=n, scheme="near_uniform", alpha=None))
    for e in (1, 5, 10, 25, 50):
        grid.append(replace(base, aggregation_interval=e, scheme="near_uniform", alpha=None))
    grid.append(replace(base, scheme="non_overlapping", alpha=None))
    for a in (0.5, 1.0, 5.0, 10.0):
        grid.append(replace(base, n_silos=4, scheme="dirichlet", alpha=a))
    return grid


def fast_profile(seed: int = 0) -> ExperimentConfig:
    """Shrunk dataset so the full default grid stays inside desk-scale minutes.

    Keeps the reference sweep's 50 total epochs (so every aggregation interval
    in {1, 5, 10, 25, 50} divides it) but uses fewer, smaller classes.
    """
    return ExperimentConfig(
        data=SyntheticConfig(
            num_frequent_classes=24,
            num_rare_classes=12,
            input_dim=16,
            frequent_count_min=8,
            frequent_count_max=24,
        ),
        hidden_dims=(32,),
        embed_dim=16,
        total_epochs=50,
        repeats=3,
        seed=seed,
    )
