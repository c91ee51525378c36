"""Top-k unique matching, evaluation settings, cluster metrics, subgroups."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgm.core import derive_rng
from fedgm.flake import DistanceMatrix, plaintext_distance_matrix
from fedgm.inference import (
    EvalReport,
    GallerySet,
    Setting,
    build_gallery,
    cluster_metrics,
    discover_subgroups,
    evaluate_matrix,
    export_embeddings,
    load_embeddings,
    rank_distinct_syndromes,
    topk_unique_match,
)


def brute_force_topk(distances, labels, true_label, k):
    """Independent re-implementation: stable sort, first occurrences, membership."""
    order = sorted(range(len(distances)), key=lambda i: (distances[i], i))
    distinct = []
    for i in order:
        if labels[i] not in distinct:
            distinct.append(labels[i])
    return true_label in distinct[:k]


class TestTopkUnique:
    def test_ranked_example(self):
        # gallery ranked by distance: labels A B A C -> distinct order A, B, C
        d = np.array([0.1, 0.2, 0.3, 0.4])
        labels = np.array([0, 1, 0, 2])  # A=0 B=1 C=2
        assert topk_unique_match(d, labels, true_label=1, k=1) is False
        assert topk_unique_match(d, labels, true_label=1, k=2) is True
        assert topk_unique_match(d, labels, true_label=1, k=5) is True

    def test_singleton_gallery(self):
        assert topk_unique_match(np.array([0.5]), np.array([3]), 3, 1) is True

    def test_absent_label_never_matches(self):
        d = np.array([0.1, 0.2])
        labels = np.array([0, 1])
        for k in (1, 5, 30):
            assert topk_unique_match(d, labels, true_label=9, k=k) is False

    def test_tie_broken_by_row_index(self):
        d = np.array([0.5, 0.5])
        labels = np.array([7, 8])
        ranked = rank_distinct_syndromes(d, labels, 2)
        assert [s for s, _ in ranked] == [7, 8]

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(min_value=1, max_value=12),
        k=st.integers(min_value=1, max_value=6),
        seed=st.integers(min_value=0, max_value=10_000),
    )
    def test_matches_brute_force(self, n, k, seed):
        rng = np.random.default_rng(seed)
        d = rng.uniform(0, 2, size=n)
        labels = rng.integers(0, 5, size=n)
        true_label = int(rng.integers(0, 5))
        assert topk_unique_match(d, labels, true_label, k) == brute_force_topk(
            list(d), list(labels), true_label, k
        )


def toy_matrix(points, labels, splits, freq):
    D = plaintext_distance_matrix(
        np.asarray(points, dtype=float), np.asarray(labels), np.arange(len(labels))
    )
    return D, np.asarray(splits), np.asarray(freq)


class TestEvaluate:
    def test_duplicated_test_rows_are_top1(self):
        pts = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]
        labels = [0, 1, 0, 1]
        splits = ["gallery", "gallery", "test", "test"]
        freq = ["frequent"] * 4
        D, s, f = toy_matrix(pts, labels, splits, freq)
        test_idx, gallery = build_gallery(D, s, f, Setting.FF)
        report = evaluate_matrix(D, test_idx, gallery, "FF", (1, 5))
        assert report.topk_acc[1] == 1.0

    def test_k_at_least_classes_saturates(self):
        rng = derive_rng(1, "sat")
        pts = rng.normal(size=(12, 3))
        labels = np.array([0, 1, 2] * 4)
        splits = np.array(["gallery"] * 6 + ["test"] * 6)
        freq = np.array(["frequent"] * 12)
        D = plaintext_distance_matrix(pts, labels, np.arange(12))
        test_idx, gallery = build_gallery(D, splits, freq, Setting.FF)
        report = evaluate_matrix(D, test_idx, gallery, "FF", (1, 3, 10))
        assert report.topk_acc[3] == 1.0
        assert report.topk_acc[10] == 1.0

    def test_matches_independent_brute_force(self):
        rng = derive_rng(2, "bf")
        pts = rng.normal(size=(18, 4))
        labels = rng.integers(0, 3, size=18)
        splits = np.array(["gallery"] * 10 + ["test"] * 8)
        freq = np.array(["frequent"] * 18)
        D = plaintext_distance_matrix(pts, labels, np.arange(18))
        test_idx, gallery = build_gallery(D, splits, freq, Setting.FF)
        report = evaluate_matrix(D, test_idx, gallery, "FF", (1, 2, 3))
        for k in (1, 2, 3):
            hits = sum(
                brute_force_topk(
                    list(D.values[t, gallery.indices]),
                    list(gallery.labels),
                    int(labels[t]),
                    k,
                )
                for t in test_idx
            )
            assert report.topk_acc[k] == hits / len(test_idx)

    def test_monotone_in_k(self):
        rng = derive_rng(3, "mono")
        pts = rng.normal(size=(30, 4))
        labels = rng.integers(0, 6, size=30)
        splits = np.array(["gallery"] * 20 + ["test"] * 10)
        freq = np.array(["frequent"] * 30)
        D = plaintext_distance_matrix(pts, labels, np.arange(30))
        test_idx, gallery = build_gallery(D, splits, freq, Setting.FF)
        report = evaluate_matrix(D, test_idx, gallery, "FF", (1, 5, 10, 30))
        accs = [report.topk_acc[k] for k in (1, 5, 10, 30)]
        assert accs == sorted(accs)

    def test_empty_test_set_rejected(self):
        pts = [[1.0, 0.0], [0.0, 1.0]]
        D = plaintext_distance_matrix(np.array(pts), np.array([0, 1]), np.arange(2))
        gallery = GallerySet(np.array([0, 1]), np.array([0, 1]), "F")
        with pytest.raises(ValueError):
            evaluate_matrix(D, np.array([], dtype=int), gallery, "FF")

    def test_gallery_composition_per_setting(self):
        pts = np.eye(4)
        labels = np.array([0, 1, 2, 3])
        splits = np.array(["gallery", "gallery", "test", "test"])
        freq = np.array(["frequent", "rare", "frequent", "rare"])
        D = plaintext_distance_matrix(pts, labels, np.arange(4))
        _, g_ff = build_gallery(D, splits, freq, Setting.FF)
        _, g_rr = build_gallery(D, splits, freq, Setting.RR)
        _, g_ffr = build_gallery(D, splits, freq, Setting.FFR)
        assert list(g_ff.indices) == [0] and g_ff.composition == "F"
        assert list(g_rr.indices) == [1] and g_rr.composition == "R"
        assert list(g_ffr.indices) == [0, 1] and g_ffr.composition == "FR"


class TestClusterMetrics:
    def test_hand_example(self):
        # two identical class-A points and one orthogonal class-B point
        pts = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        D = plaintext_distance_matrix(pts, np.array([0, 0, 1]), np.arange(3))
        intra, inter = cluster_metrics(D, np.arange(3))
        assert intra == pytest.approx(0.0, abs=1e-12)
        assert inter == pytest.approx(1.0)

    def test_single_class_rejected(self):
        pts = np.array([[1.0, 0.0], [1.0, 0.1]])
        D = plaintext_distance_matrix(pts, np.array([0, 0]), np.arange(2))
        with pytest.raises(ValueError):
            cluster_metrics(D, np.arange(2))

    def test_no_intra_pair_rejected(self):
        pts = np.array([[1.0, 0.0], [0.0, 1.0]])
        D = plaintext_distance_matrix(pts, np.array([0, 1]), np.arange(2))
        with pytest.raises(ValueError):
            cluster_metrics(D, np.arange(2))

    def test_separated_clusters_intra_below_inter(self):
        rng = derive_rng(4, "cluster")
        a = rng.normal(size=(10, 4)) * 0.05 + np.array([5.0, 0, 0, 0])
        b = rng.normal(size=(10, 4)) * 0.05 + np.array([0, 5.0, 0, 0])
        pts = np.vstack([a, b])
        labels = np.array([0] * 10 + [1] * 10)
        D = plaintext_distance_matrix(pts, labels, np.arange(20))
        intra, inter = cluster_metrics(D, np.arange(20))
        assert intra < inter


class TestSubgroups:
    def brute_components(self, values, tau):
        n = len(values)
        groups = []
        seen = set()
        for start in range(n):
            if start in seen:
                continue
            comp = {start}
            frontier = [start]
            while frontier:
                u = frontier.pop()
                for v in range(n):
                    if v not in comp and values[u][v] <= tau and u != v:
                        comp.add(v)
                        frontier.append(v)
            seen |= comp
            groups.append(sorted(comp))
        return [g for g in groups if len(g) >= 2]

    def test_threshold_below_everything_empty(self):
        rng = derive_rng(5, "sg")
        pts = rng.normal(size=(8, 3))
        D = plaintext_distance_matrix(pts, np.zeros(8, int), np.arange(8))
        offdiag = D.values[~np.eye(8, dtype=bool)]
        tau = float(offdiag.min()) / 2
        assert discover_subgroups(D, tau) == []

    def test_two_identical_points(self):
        pts = np.array([[1.0, 1.0], [1.0, 1.0], [-1.0, 1.0]])
        D = plaintext_distance_matrix(pts, np.array([0, 1, 2]), np.array([4, 5, 6]))
        groups = discover_subgroups(D, 0.01, min_size=2)
        assert len(groups) == 1
        assert groups[0]["ids"] == [4, 5]

    def test_planted_clique_matches_brute_force(self):
        rng = derive_rng(6, "clique")
        scattered = rng.normal(size=(12, 4)) * 2
        planted = np.tile(np.array([3.0, 3.0, 0.0, 0.0]), (4, 1))
        planted += rng.normal(size=planted.shape) * 1e-4
        pts = np.vstack([scattered, planted])
        D = plaintext_distance_matrix(pts, np.zeros(16, int), np.arange(16))
        tau = 1e-4
        groups = discover_subgroups(D, tau, min_size=2)
        brute = self.brute_components(D.values, tau)
        assert [g["ids"] for g in groups] == brute
        assert groups and groups[0]["ids"] == [12, 13, 14, 15]

    def test_permutation_invariant(self):
        rng = derive_rng(7, "perm")
        pts = rng.normal(size=(10, 3))
        pts[3] = pts[8] + 1e-9  # one planted pair
        labels = np.zeros(10, int)
        ids = np.arange(100, 110)
        D = plaintext_distance_matrix(pts, labels, ids)
        base = discover_subgroups(D, 1e-6)
        perm = rng.permutation(10)
        Dp = plaintext_distance_matrix(pts[perm], labels[perm], ids[perm])
        assert discover_subgroups(Dp, 1e-6) == base

    def test_silos_reported(self):
        pts = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        D = plaintext_distance_matrix(pts, np.zeros(3, int), np.arange(3))
        groups = discover_subgroups(D, 0.01, silos=np.array([2, 5, 9]))
        assert groups[0]["silos"] == [2, 5]


class TestEvalReport:
    def test_monotonicity_enforced(self):
        with pytest.raises(ValueError):
            EvalReport(setting="FF", topk_acc={1: 0.9, 5: 0.5}, n_test=10)

    def test_csv_rows(self):
        r = EvalReport(setting="RR", topk_acc={1: 0.4, 5: 0.6}, n_test=20, seed=3)
        rows = r.csv_rows()
        assert rows[0] == {"setting": "RR", "k": 1, "accuracy": 0.4, "n_test": 20, "seed": 3}
        assert len(rows) == 2


class TestExport:
    def test_round_trip(self, tmp_path):
        rng = derive_rng(8, "exp")
        X = rng.normal(size=(5, 3))
        labels = np.array([1, 1, 2, 2, 3])
        ids = np.array([10, 11, 12, 13, 14])
        path = tmp_path / "emb.bin"
        export_embeddings(path, X, labels, ids)
        X2, l2, i2 = load_embeddings(path)
        assert np.array_equal(X, X2)
        assert np.array_equal(labels, l2)
        assert np.array_equal(ids, i2)
