"""Synthetic patient dataset, frequency labeling, splits, and silo partitioners.

Real patient images are access-restricted, so records here are Gaussian
feature clusters: one seeded mean per syndrome, samples = mean + spread*noise.
Class counts follow a long-tailed power law for frequent syndromes; rare
syndromes (< 7 samples) are generated but never trained on, matching how the
system treats data-scarce classes.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .core import SeededRng, derive_rng

FREQUENT_MIN_COUNT = 7  # >= 7 samples -> frequent, < 7 -> rare

SPLITS = ("train", "val", "test", "gallery")


class FrequencyClass(enum.Enum):
    FREQUENT = "frequent"
    RARE = "rare"


def classify_frequency(count: int) -> FrequencyClass:
    if count < 1:
        raise ValueError("count must be >= 1")
    return FrequencyClass.RARE if count < FREQUENT_MIN_COUNT else FrequencyClass.FREQUENT


@dataclass
class PatientRecord:
    id: int
    features: np.ndarray
    syndrome: int
    split: str | None = None
    silo: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)


@dataclass(frozen=True)
class SyntheticConfig:
    num_frequent_classes: int = 60
    num_rare_classes: int = 30
    input_dim: int = 32
    frequent_count_min: int = 10
    frequent_count_max: int = 60
    count_power: float = 1.3  # larger -> heavier skew toward the minimum count
    rare_count_min: int = 2
    rare_count_max: int = 6
    mean_scale: float = 1.0
    cluster_spread: float = 1.1

    def __post_init__(self):
        if self.frequent_count_min < FREQUENT_MIN_COUNT:
            raise ValueError(f"frequent classes need >= {FREQUENT_MIN_COUNT} samples")
        if not 1 <= self.rare_count_min <= self.rare_count_max < FREQUENT_MIN_COUNT:
            raise ValueError(f"rare class counts must stay < {FREQUENT_MIN_COUNT}")
        if self.frequent_count_max < self.frequent_count_min:
            raise ValueError("frequent_count_max < frequent_count_min")


def _frequent_counts(cfg: SyntheticConfig, rng: SeededRng) -> np.ndarray:
    """Long-tailed counts in [min, max]: Pareto-style, most classes near min."""
    u = rng.uniform(size=cfg.num_frequent_classes)
    counts = np.floor(cfg.frequent_count_min * (1.0 - u) ** (-1.0 / cfg.count_power))
    return np.clip(counts, cfg.frequent_count_min, cfg.frequent_count_max).astype(int)


def generate_synthetic(cfg: SyntheticConfig, seed: int) -> list[PatientRecord]:
    """Deterministic Gaussian-cluster records; frequent classes first, then rare."""
    rng = derive_rng(seed, "data/gen")
    counts = list(_frequent_counts(cfg, rng.child("counts")))
    counts += list(
        rng.child("counts-rare").integers(
            cfg.rare_count_min, cfg.rare_count_max + 1, size=cfg.num_rare_classes
        )
    )
    records = []
    next_id = 0
    for syndrome, count in enumerate(counts):
        crng = rng.child(f"class={syndrome}")
        mean = crng.normal(0.0, cfg.mean_scale, size=cfg.input_dim)
        noise = crng.normal(0.0, 1.0, size=(int(count), cfg.input_dim))
        for row in mean + cfg.cluster_spread * noise:
            records.append(PatientRecord(id=next_id, features=row, syndrome=syndrome))
            next_id += 1
    return records


def syndrome_counts(records: list[PatientRecord]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for r in records:
        counts[r.syndrome] = counts.get(r.syndrome, 0) + 1
    return counts


def frequency_by_class(records: list[PatientRecord]) -> dict[int, FrequencyClass]:
    return {c: classify_frequency(n) for c, n in syndrome_counts(records).items()}


@dataclass(frozen=True)
class SplitRatios:
    train: float = 0.55
    val: float = 0.10
    test: float = 0.15
    gallery: float = 0.20

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.train, self.val, self.test, self.gallery)


def _allocate(count: int, ratios: list[float]) -> list[int]:
    """Integer allocation by largest remainder, >= 1 per positive-ratio split.

    Falls back to all-but-one gallery / one test when the class is too small
    to give every requested split a sample.
    """
    total = sum(ratios)
    shares = [count * r / total for r in ratios]
    counts = [int(np.floor(s)) for s in shares]
    remainders = [s - c for s, c in zip(shares, counts)]
    for _ in range(count - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    # Guarantee representation for every split that asked for a share.
    needed = [i for i, r in enumerate(ratios) if r > 0]
    if count < len(needed):
        return None
    for i in needed:
        while counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_dataset(
    records: list[PatientRecord], ratios: SplitRatios, seed: int
) -> list[PatientRecord]:
    """Per-class stratified split, in place; returns the same list.

    Frequent classes receive train/val/test/gallery; rare classes only
    test/gallery (they are never trained on).  Classes too small to satisfy
    the ratios put one record in test and the rest in gallery.
    """
    rng = derive_rng(seed, "data/split")
    freq = frequency_by_class(records)
    by_class: dict[int, list[PatientRecord]] = {}
    for r in records:
        by_class.setdefault(r.syndrome, []).append(r)
    for syndrome in sorted(by_class):
        members = sorted(by_class[syndrome], key=lambda r: r.id)
        order = rng.child(f"class={syndrome}").permutation(len(members))
        shuffled = [members[i] for i in order]
        if freq[syndrome] is FrequencyClass.FREQUENT:
            parts = _allocate(len(members), list(ratios.as_tuple()))
            names = SPLITS
        else:
            rare_ratios = [ratios.test, ratios.gallery]
            if sum(rare_ratios) <= 0:
                rare_ratios = [0.5, 0.5]
            parts = _allocate(len(members), rare_ratios)
            names = ("test", "gallery")
        if parts is None:  # documented tie-break for tiny classes
            parts = [1, max(len(members) - 1, 0)]
            names = ("test", "gallery")
        i = 0
        for name, n in zip(names, parts):
            for r in shuffled[i:i + n]:
                r.split = name
            i += n
    return records


@dataclass(frozen=True)
class Partition:
    """Disjoint cover of a record set: silo index -> record ids."""

    assignment: dict[int, list[int]]
    scheme: str
    alpha: float | None = None

    def __post_init__(self):
        sizes = [len(v) for v in self.assignment.values()]
        if any(s == 0 for s in sizes):
            raise ValueError("every silo must be nonempty")
        ids = [i for v in self.assignment.values() for i in v]
        if len(ids) != len(set(ids)):
            raise ValueError("record assigned to more than one silo")

    @property
    def n_silos(self) -> int:
        return len(self.assignment)


def partition_near_uniform(
    records: list[PatientRecord], n_silos: int, seed: int
) -> Partition:
    """Per class, deal shuffled records round-robin from a seeded start offset.

    Each silo gets within +-1 of the same count of every class.
    """
    if n_silos < 1:
        raise ValueError("n_silos must be >= 1")
    rng = derive_rng(seed, "partition/near-uniform")
    assignment: dict[int, list[int]] = {i: [] for i in range(n_silos)}
    by_class: dict[int, list[PatientRecord]] = {}
    for r in records:
        by_class.setdefault(r.syndrome, []).append(r)
    for syndrome in sorted(by_class):
        members = sorted(by_class[syndrome], key=lambda r: r.id)
        crng = rng.child(f"class={syndrome}")
        order = crng.permutation(len(members))
        start = int(crng.integers(0, n_silos))
        for pos, idx in enumerate(order):
            assignment[(start + pos) % n_silos].append(members[idx].id)
    return Partition(assignment, "near_uniform")


def partition_non_overlapping(
    records: list[PatientRecord], n_silos: int, seed: int
) -> Partition:
    """Whole classes dealt greedily (largest first) to the emptiest silo.

    No class appears on two silos; requires at least as many classes as silos.
    """
    if n_silos < 1:
        raise ValueError("n_silos must be >= 1")
    by_class: dict[int, list[PatientRecord]] = {}
    for r in records:
        by_class.setdefault(r.syndrome, []).append(r)
    if len(by_class) < n_silos:
        raise ValueError(
            f"non-overlapping partition needs >= {n_silos} classes, have {len(by_class)}"
        )
    rng = derive_rng(seed, "partition/non-overlapping")
    classes = sorted(by_class)
    order = rng.permutation(len(classes))  # tie-break among equal-size classes
    ranked = sorted(
        (classes[i] for i in order), key=lambda c: -len(by_class[c])
    )
    assignment: dict[int, list[int]] = {i: [] for i in range(n_silos)}
    totals = [0] * n_silos
    for c in ranked:
        silo = int(np.argmin(totals))
        assignment[silo].extend(r.id for r in sorted(by_class[c], key=lambda r: r.id))
        totals[silo] += len(by_class[c])
    return Partition(assignment, "non_overlapping")


def partition_dirichlet(
    records: list[PatientRecord], n_silos: int, alpha: float, seed: int
) -> Partition:
    """Per class, silo proportions ~ Dirichlet(alpha * 1_N), then a multinomial deal.

    A silo left empty across all classes is repaired by taking one record from
    the largest silo (training requires nonempty silos).
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if n_silos < 1:
        raise ValueError("n_silos must be >= 1")
    rng = derive_rng(seed, "partition/dirichlet")
    assignment: dict[int, list[int]] = {i: [] for i in range(n_silos)}
    by_class: dict[int, list[PatientRecord]] = {}
    for r in records:
        by_class.setdefault(r.syndrome, []).append(r)
    for syndrome in sorted(by_class):
        members = sorted(by_class[syndrome], key=lambda r: r.id)
        crng = rng.child(f"class={syndrome}")
        proportions = crng.dirichlet([alpha] * n_silos)
        counts = crng.multinomial(len(members), proportions)
        order = crng.permutation(len(members))
        pos = 0
        for silo, n in enumerate(counts):
            for idx in order[pos:pos + n]:
                assignment[silo].append(members[idx].id)
            pos += n
    for silo in range(n_silos):  # empty-silo repair
        if not assignment[silo]:
            donor = max(assignment, key=lambda s: len(assignment[s]))
            assignment[silo].append(assignment[donor].pop())
    return Partition(assignment, "dirichlet", alpha=float(alpha))


def class_distribution_sd(
    partition: Partition, records: list[PatientRecord]
) -> dict[int, float]:
    """Per class, the population SD across silos of the class's silo proportions."""
    label_of = {r.id: r.syndrome for r in records}
    silos = sorted(partition.assignment)
    per_class: dict[int, np.ndarray] = {}
    for si, silo in enumerate(silos):
        for rid in partition.assignment[silo]:
            c = label_of[rid]
            if c not in per_class:
                per_class[c] = np.zeros(len(silos))
            per_class[c][si] += 1
    return {
        c: float(np.std(counts / counts.sum()))
        for c, counts in sorted(per_class.items())
    }


def apply_partition(records: list[PatientRecord], partition: Partition) -> None:
    """Write silo assignments onto the records covered by the partition."""
    silo_of = {
        rid: silo for silo, ids in partition.assignment.items() for rid in ids
    }
    for r in records:
        if r.id in silo_of:
            r.silo = silo_of[r.id]


def assign_remaining_silos(
    records: list[PatientRecord], n_silos: int, seed: int
) -> None:
    """Deal records without a silo (val/test/gallery, rare) round-robin per class.

    These assignments only decide which silo uploads which rows; they never
    affect training.
    """
    rng = derive_rng(seed, "partition/remaining")
    by_class: dict[int, list[PatientRecord]] = {}
    for r in records:
        if r.silo is None:
            by_class.setdefault(r.syndrome, []).append(r)
    for syndrome in sorted(by_class):
        members = sorted(by_class[syndrome], key=lambda r: r.id)
        crng = rng.child(f"class={syndrome}")
        order = crng.permutation(len(members))
        start = int(crng.integers(0, n_silos))
        for pos, idx in enumerate(order):
            members[idx].silo = (start + pos) % n_silos


# ---------------------------------------------------------------------------
# File formats: JSON-lines dataset, JSON partition map.

def save_jsonl(path, records: list[PatientRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "id": r.id,
                "features": [float(x) for x in r.features],
                "syndrome": int(r.syndrome),
                "split": r.split,
                "silo": r.silo,
            }, separators=(",", ":")) + "\n")


def load_jsonl(path) -> list[PatientRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            records.append(PatientRecord(
                id=d["id"], features=np.array(d["features"], dtype=np.float64),
                syndrome=d["syndrome"], split=d.get("split"), silo=d.get("silo"),
            ))
    return records


def save_partition(path, partition: Partition) -> None:
    doc = {
        "scheme": partition.scheme,
        "alpha": partition.alpha,
        "assignment": {str(k): v for k, v in sorted(partition.assignment.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_partition(path) -> Partition:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return Partition(
        {int(k): list(v) for k, v in doc["assignment"].items()},
        doc["scheme"], doc.get("alpha"),
    )
