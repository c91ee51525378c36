"""Masked Gram-matrix protocol for private pairwise dot products.

All silos derive one common tall mask matrix A (delta x f, delta > f) from the
shared seed.  Each silo samples its own private left inverse L_i of A
(L_i A = I_f, non-unique because A is tall) and ships X_i L_i instead of its
latent rows X_i.  The aggregator holds the helper K = A A^T, and because
L_i A = L_j A = I,

    (X_i L_i) K (X_j L_j)^T = X_i (L_i A)(L_j A)^T X_j^T = X_i X_j^T,

i.e. it recovers exact pairwise dot products, and from them cosine distances,
without ever seeing an f-dimensional plaintext row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SeededRng, derive_rng

COMMON_MASK_LABEL = "flake/common"
DEFAULT_EXTRA_DIMS = 16  # delta = f + 16 unless configured otherwise
NORM_EPS = 1e-12
_MAX_REDRAWS = 3


class MaskRankError(RuntimeError):
    """The common mask matrix failed to reach full column rank after redraws."""


@dataclass(frozen=True)
class CommonMask:
    """Shared tall mask A and the aggregator-side helper K = A A^T."""

    A: np.ndarray  # (delta, f)
    K: np.ndarray  # (delta, delta)

    @property
    def f(self) -> int:
        return self.A.shape[1]

    @property
    def delta(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class LeftInverse:
    """Silo-private L with L A = I_f."""

    L: np.ndarray  # (f, delta)


@dataclass(frozen=True)
class MaskedEmbeddings:
    """One silo's masked latent rows plus plaintext labels and row ids."""

    silo: int
    rows: np.ndarray  # (n_i, delta)
    labels: np.ndarray  # (n_i,) syndrome indices
    row_ids: np.ndarray  # (n_i,) patient ids

    def __post_init__(self):
        if not (len(self.rows) == len(self.labels) == len(self.row_ids)):
            raise ValueError("rows, labels, and row_ids must align")


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray  # (n, n)
    labels: np.ndarray
    row_ids: np.ndarray


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric cosine distances (range [0, 2], zero diagonal) with metadata."""

    values: np.ndarray
    labels: np.ndarray
    row_ids: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]


def gen_common_mask(seed: int, f: int, delta: int | None = None) -> CommonMask:
    """Standard-normal A from the shared stream; redrawn if rank-deficient.

    Redraws continue the same stream, so every silo redraws identically.
    """
    if delta is None:
        delta = f + DEFAULT_EXTRA_DIMS
    if delta < f + 1:
        raise ValueError(f"delta must be >= f + 1 (got f={f}, delta={delta})")
    rng = derive_rng(seed, COMMON_MASK_LABEL)
    for _ in range(_MAX_REDRAWS):
        A = rng.normal(size=(delta, f))
        if np.linalg.matrix_rank(A) == f:
            return CommonMask(A=A, K=A @ A.T)
    raise MaskRankError(f"no rank-{f} mask after {_MAX_REDRAWS} draws")


def sample_left_inverse(cm: CommonMask, silo_rng: SeededRng) -> LeftInverse:
    """L = pinv(A) + R (I - A pinv(A)): the silo-specific part is the random R.

    Any such L satisfies L A = I because the second term annihilates A.
    """
    A = cm.A
    gram = A.T @ A
    if np.linalg.cond(gram) > 1e12:
        raise MaskRankError("A^T A ill-conditioned; redraw the common mask")
    pinv = np.linalg.solve(gram, A.T)  # (f, delta)
    residual = np.eye(cm.delta) - A @ pinv
    R = silo_rng.normal(size=(cm.f, cm.delta))
    return LeftInverse(L=pinv + R @ residual)


def mask_embeddings(
    X: np.ndarray, li: LeftInverse, labels: np.ndarray, row_ids: np.ndarray, silo: int
) -> MaskedEmbeddings:
    """Send X L instead of X; linear, so scaling commutes with masking."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != li.L.shape[0]:
        raise ValueError(f"latent dim {X.shape[1]} != left inverse f {li.L.shape[0]}")
    return MaskedEmbeddings(
        silo=silo,
        rows=X @ li.L,
        labels=np.asarray(labels, dtype=np.int64),
        row_ids=np.asarray(row_ids, dtype=np.int64),
    )


def compute_gram(K: np.ndarray, pooled: list[MaskedEmbeddings]) -> GramMatrix:
    """Aggregator side: exact pairwise dot products from masked rows only."""
    if not pooled:
        raise ValueError("no masked embeddings")
    delta = K.shape[0]
    for me in pooled:
        if me.rows.shape[1] != delta:
            raise ValueError(
                f"silo {me.silo} rows have width {me.rows.shape[1]}, helper is {delta}"
            )
    rows = np.vstack([me.rows for me in pooled])
    labels = np.concatenate([me.labels for me in pooled])
    row_ids = np.concatenate([me.row_ids for me in pooled])
    half = rows @ K
    return GramMatrix(values=half @ rows.T, labels=labels, row_ids=row_ids)


def cross_gram(K: np.ndarray, query_rows: np.ndarray, gallery_rows: np.ndarray):
    """Gram blocks for ad-hoc query rows: (query x gallery) and query diagonal."""
    qk = query_rows @ K
    return qk @ gallery_rows.T, np.einsum("ij,ij->i", qk, query_rows)


def cosine_distance_matrix(G: GramMatrix) -> DistanceMatrix:
    """D(p,q) = 1 - G(p,q) / (sqrt(G(p,p)) sqrt(G(q,q))), zero diagonal."""
    diag = np.diag(G.values).copy()
    bad = diag <= 0
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueError(
            f"non-positive Gram diagonal {diag[i]} at row {i} "
            f"(id {int(G.row_ids[i])}); zero-norm rows must be rejected upstream"
        )
    norms = np.sqrt(diag)
    values = 1.0 - G.values / np.outer(norms, norms)
    values = (values + values.T) / 2.0
    np.fill_diagonal(values, 0.0)
    return DistanceMatrix(values=values, labels=G.labels, row_ids=G.row_ids)


def plaintext_distance_matrix(
    X: np.ndarray, labels: np.ndarray, row_ids: np.ndarray
) -> DistanceMatrix:
    """Reference path used by the centralized runner and the oracle tests."""
    X = np.asarray(X, dtype=np.float64)
    G = GramMatrix(
        values=X @ X.T,
        labels=np.asarray(labels, dtype=np.int64),
        row_ids=np.asarray(row_ids, dtype=np.int64),
    )
    return cosine_distance_matrix(G)


def ensemble_distance(members: list[DistanceMatrix]) -> DistanceMatrix:
    """Element-wise mean over ensemble members' distance matrices."""
    if not members:
        raise ValueError("no member matrices")
    first = members[0]
    for m in members[1:]:
        if m.values.shape != first.values.shape:
            raise ValueError("member distance matrices differ in shape")
        if not np.array_equal(m.row_ids, first.row_ids):
            raise ValueError("member distance matrices differ in row ids")
    mean = np.mean([m.values for m in members], axis=0)
    return DistanceMatrix(values=mean, labels=first.labels, row_ids=first.row_ids)
