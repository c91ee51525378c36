"""Top-k unique-syndrome retrieval, evaluation settings, and cluster metrics.

A query is correct at k when its true syndrome appears among the first k
*distinct* syndromes of the distance-ranked gallery.  Four test-gallery
compositions are evaluated: frequent vs frequent (FF), rare vs rare (RR), and
frequent/rare test sets against the combined frequent+rare gallery (FFR,
RFR).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .data import FrequencyClass
from .flake import DistanceMatrix

TOPK_DEFAULT = (1, 5, 10, 30)


class Setting(enum.Enum):
    FF = "FF"
    RR = "RR"
    FFR = "FFR"
    RFR = "RFR"


# test composition, gallery composition per setting
_SETTING_SPLITS = {
    Setting.FF: ({FrequencyClass.FREQUENT}, {FrequencyClass.FREQUENT}),
    Setting.RR: ({FrequencyClass.RARE}, {FrequencyClass.RARE}),
    Setting.FFR: ({FrequencyClass.FREQUENT}, {FrequencyClass.FREQUENT, FrequencyClass.RARE}),
    Setting.RFR: ({FrequencyClass.RARE}, {FrequencyClass.FREQUENT, FrequencyClass.RARE}),
}


@dataclass(frozen=True)
class GallerySet:
    """Row indices into a DistanceMatrix acting as the reference set."""

    indices: np.ndarray
    labels: np.ndarray
    composition: str  # "F", "R", or "FR"

    def __post_init__(self):
        if len(self.indices) != len(self.labels):
            raise ValueError("indices and labels must align")


@dataclass
class EvalReport:
    setting: str
    topk_acc: dict[int, float]
    n_test: int
    seed: int | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        ks = sorted(self.topk_acc)
        accs = [self.topk_acc[k] for k in ks]
        if any(b < a - 1e-12 for a, b in zip(accs, accs[1:])):
            raise ValueError(f"top-k accuracy must be non-decreasing in k: {self.topk_acc}")

    def to_json(self) -> str:
        return json.dumps({
            "setting": self.setting,
            "topk_acc": {str(k): v for k, v in sorted(self.topk_acc.items())},
            "n_test": self.n_test,
            "seed": self.seed,
            "config": self.config,
        }, separators=(",", ":"), sort_keys=True)

    def csv_rows(self) -> list[dict]:
        return [
            {"setting": self.setting, "k": k, "accuracy": acc,
             "n_test": self.n_test, "seed": self.seed}
            for k, acc in sorted(self.topk_acc.items())
        ]


def rank_distinct_syndromes(
    distances: np.ndarray, gallery_labels: np.ndarray, k: int
) -> list[tuple[int, float]]:
    """First k distinct syndromes by ascending distance.

    Ties are broken by gallery row index (stable sort), so rankings are
    deterministic and identical between the masked and plaintext pipelines.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(distances) != len(gallery_labels) or len(distances) == 0:
        raise ValueError("nonempty, aligned distances and labels required")
    order = np.argsort(distances, kind="stable")
    out: list[tuple[int, float]] = []
    seen: set[int] = set()
    for idx in order:
        label = int(gallery_labels[idx])
        if label not in seen:
            seen.add(label)
            out.append((label, float(distances[idx])))
            if len(out) == k:
                break
    return out


def topk_unique_match(
    distances: np.ndarray, gallery_labels: np.ndarray, true_label: int, k: int
) -> bool:
    """True iff the true syndrome is among the first k distinct syndromes."""
    ranked = rank_distinct_syndromes(distances, gallery_labels, k)
    return any(label == true_label for label, _ in ranked)


def evaluate_matrix(
    D: DistanceMatrix,
    test_indices: np.ndarray,
    gallery: GallerySet,
    setting: str,
    k_list: tuple[int, ...] = TOPK_DEFAULT,
    seed: int | None = None,
) -> EvalReport:
    """Top-k accuracy of every test row against the gallery rows of D."""
    test_indices = np.asarray(test_indices, dtype=np.int64)
    if test_indices.size == 0:
        raise ValueError(f"empty test set for setting {setting}")
    if np.intersect1d(test_indices, gallery.indices).size:
        raise ValueError("test rows must be disjoint from gallery rows")
    hits = {k: 0 for k in k_list}
    for t in test_indices:
        dist = D.values[t, gallery.indices]
        true_label = int(D.labels[t])
        ranked_all = rank_distinct_syndromes(dist, gallery.labels, max(k_list))
        position = next(
            (i for i, (label, _) in enumerate(ranked_all) if label == true_label), None
        )
        for k in k_list:
            if position is not None and position < k:
                hits[k] += 1
    return EvalReport(
        setting=setting,
        topk_acc={k: hits[k] / test_indices.size for k in k_list},
        n_test=int(test_indices.size),
        seed=seed,
    )


def build_gallery(
    D: DistanceMatrix,
    splits: np.ndarray,
    freq: np.ndarray,
    setting: Setting,
) -> tuple[np.ndarray, GallerySet]:
    """Test indices and gallery for one setting, from per-row split/frequency tags.

    `splits` holds "train"/"val"/"test"/"gallery" per row of D; `freq` holds
    "frequent"/"rare" per row.
    """
    want_test, want_gallery = _SETTING_SPLITS[setting]
    test_names = {f.value for f in want_test}
    gallery_names = {f.value for f in want_gallery}
    splits = np.asarray(splits)
    freq = np.asarray(freq)
    test_idx = np.flatnonzero((splits == "test") & np.isin(freq, sorted(test_names)))
    gal_idx = np.flatnonzero((splits == "gallery") & np.isin(freq, sorted(gallery_names)))
    composition = "FR" if len(gallery_names) == 2 else (
        "F" if gallery_names == {"frequent"} else "R"
    )
    gallery = GallerySet(
        indices=gal_idx, labels=D.labels[gal_idx], composition=composition
    )
    return test_idx, gallery


def evaluate_all_settings(
    D: DistanceMatrix,
    splits: np.ndarray,
    freq: np.ndarray,
    k_list: tuple[int, ...] = TOPK_DEFAULT,
    seed: int | None = None,
) -> dict[str, EvalReport]:
    reports = {}
    for setting in Setting:
        test_idx, gallery = build_gallery(D, splits, freq, setting)
        reports[setting.value] = evaluate_matrix(
            D, test_idx, gallery, setting.value, k_list, seed
        )
    return reports


def cluster_metrics(
    D: DistanceMatrix, scope: np.ndarray
) -> tuple[float, float]:
    """Mean intra-class and inter-class distances over the scoped rows.

    Classes with fewer than two scoped members contribute no intra pairs;
    raises when either average has no pairs at all.
    """
    scope = np.asarray(scope, dtype=np.int64)
    if scope.size < 2:
        raise ValueError("need at least two rows in scope")
    labels = D.labels[scope]
    sub = D.values[np.ix_(scope, scope)]
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(same, dtype=bool), k=1)
    intra_mask = same & upper
    inter_mask = ~same & upper
    if not intra_mask.any():
        raise ValueError("no class in scope has two members (intra undefined)")
    if not inter_mask.any():
        raise ValueError("scope holds a single class (inter undefined)")
    return float(sub[intra_mask].mean()), float(sub[inter_mask].mean())


def discover_subgroups(
    D: DistanceMatrix,
    threshold: float,
    min_size: int = 2,
    silos: np.ndarray | None = None,
) -> list[dict]:
    """Connected components of the graph {D(p,q) <= threshold}, size >= min_size.

    Each group lists member ids (and owning silos when known), so only the
    involved silos need to be notified.
    """
    if not 0 < threshold < 2:
        raise ValueError("threshold must be in (0, 2)")
    if min_size < 2:
        raise ValueError("min_size must be >= 2")
    n = D.n
    adj = csr_matrix((D.values <= threshold) & ~np.eye(n, dtype=bool))
    n_comp, comp = connected_components(adj, directed=False)
    groups = []
    for c in range(n_comp):
        members = np.flatnonzero(comp == c)
        if members.size < min_size:
            continue
        group = {
            "ids": sorted(int(D.row_ids[m]) for m in members),
            "labels": sorted({int(D.labels[m]) for m in members}),
        }
        if silos is not None:
            group["silos"] = sorted({int(silos[m]) for m in members})
        groups.append(group)
    return sorted(groups, key=lambda g: g["ids"])


EMBEDDINGS_FORMAT = "fedgm-embeddings-v1"


def export_embeddings(path, X: np.ndarray, labels: np.ndarray, ids: np.ndarray) -> None:
    """Row-major float64 dump with a JSON header, for external projection tools."""
    X = np.asarray(X, dtype=np.float64)
    header = {
        "format": EMBEDDINGS_FORMAT,
        "n": int(X.shape[0]),
        "dim": int(X.shape[1]),
        "labels": [int(v) for v in labels],
        "ids": [int(v) for v in ids],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        fh.write(X.astype("<f8").tobytes())


def load_embeddings(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != EMBEDDINGS_FORMAT:
            raise ValueError(f"not a {EMBEDDINGS_FORMAT} file")
        raw = fh.read()
    X = np.frombuffer(raw, dtype="<f8").reshape(header["n"], header["dim"])
    return X, np.array(header["labels"]), np.array(header["ids"])
