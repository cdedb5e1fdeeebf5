"""Pair- and triplet-based metric-learning losses over a batch.

Every loss consumes the batch similarity matrix (inner products of
unit-norm descriptors) and returns both a scalar value and the gradient
with respect to the embedding rows. Because rows live on the unit sphere,
gradients are composed with the sphere-normalization Jacobian (the
tangent projection at each row), so the trainer receives the derivative
of ``loss(normalize(raw_rows))`` in a single consistent convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingBatch, similarity_matrix
from .mining import MinedSet


@dataclass
class LossConfig:
    """Margin and weighting hyperparameters shared by the loss family."""

    margin: float = 0.5
    ms_alpha: float = 2.0
    ms_beta: float = 50.0

    def __post_init__(self):
        if not np.isfinite(self.margin):
            raise ValueError("margin must be finite")
        if self.ms_alpha <= 0 or self.ms_beta <= 0:
            raise ValueError("ms_alpha and ms_beta must be positive")


def default_loss_config(kind: str) -> LossConfig:
    """Conventional defaults: the margins differ per loss family."""
    if kind == "contrastive":
        return LossConfig(margin=0.5)
    if kind in ("triplet", "weak_triplet"):
        return LossConfig(margin=0.1)
    if kind == "multi_similarity":
        return LossConfig(margin=0.5, ms_alpha=2.0, ms_beta=50.0)
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass
class LossOutput:
    """Scalar loss plus d loss / d raw-embedding rows (N, D).

    `degenerate` marks batches where the mined set was empty, so the
    zero value carries no training signal.
    """

    value: float
    grad: np.ndarray
    degenerate: bool = False


@dataclass
class PairLabels:
    """Binary positive-pair indicator: I[i, j] = 1 iff labels match, i != j."""

    indicator: np.ndarray

    def __post_init__(self):
        self.indicator = np.asarray(self.indicator, dtype=bool)
        n = self.indicator.shape[0]
        if self.indicator.shape != (n, n):
            raise ValueError("indicator must be square")
        if np.any(np.diag(self.indicator)):
            raise ValueError("indicator diagonal must be zero")
        if not np.array_equal(self.indicator, self.indicator.T):
            raise ValueError("indicator must be symmetric")

    @classmethod
    def from_labels(cls, labels) -> "PairLabels":
        labels = np.asarray(labels)
        same = labels[:, None] == labels[None, :]
        np.fill_diagonal(same, False)
        return cls(same)


@dataclass
class WeakTuple:
    """A query, its potential positives and its definite negatives.

    Used when labels are noisy: only the most query-similar potential
    positive is trusted to depict the same place.
    """

    query: int
    potential_positives: list[int]
    definite_negatives: list[int]

    def __post_init__(self):
        pos = set(self.potential_positives)
        neg = set(self.definite_negatives)
        if pos & neg:
            raise ValueError("positive and negative sets overlap")
        if self.query in pos or self.query in neg:
            raise ValueError("query may not appear in its own candidate sets")


def _tangent_project(grad: np.ndarray, rows: np.ndarray) -> np.ndarray:
    # Jacobian of row-wise normalization evaluated at unit rows.
    radial = np.sum(grad * rows, axis=1, keepdims=True)
    return grad - radial * rows


def _grad_from_similarity_weights(weights: np.ndarray, batch: EmbeddingBatch) -> np.ndarray:
    """Chain d loss / d S (as the matrix `weights`) back to the embedding rows."""
    z = batch.rows
    grad = (weights + weights.T) @ z
    return _tangent_project(grad, z)


def _resolve_sim(batch: EmbeddingBatch, sim: np.ndarray | None) -> np.ndarray:
    if sim is None:
        return similarity_matrix(batch)
    sim = np.asarray(sim, dtype=np.float64)
    if sim.shape != (len(batch), len(batch)):
        raise ValueError("similarity matrix does not match batch size")
    return sim


def contrastive_loss(
    batch: EmbeddingBatch,
    pairs: MinedSet,
    cfg: LossConfig,
    sim: np.ndarray | None = None,
) -> LossOutput:
    """Pull positives together, hinge negatives below the margin.

    Per mined pair: -S_ij for positives, max(S_ij - margin, 0) for
    negatives; the total is the mean over all mined pairs.
    """
    s = _resolve_sim(batch, sim)
    total_pairs = len(pairs.positive_pairs) + len(pairs.negative_pairs)
    if total_pairs == 0:
        return LossOutput(0.0, np.zeros_like(batch.rows), degenerate=True)

    weights = np.zeros_like(s)
    value = 0.0
    for i, j in pairs.positive_pairs:
        value -= s[i, j]
        weights[i, j] -= 1.0
    for i, k in pairs.negative_pairs:
        slack = s[i, k] - cfg.margin
        if slack > 0.0:
            value += slack
            weights[i, k] += 1.0
    value /= total_pairs
    weights /= total_pairs
    return LossOutput(value, _grad_from_similarity_weights(weights, batch))


def _as_triplets(triplets) -> list[tuple[int, int, int]]:
    if isinstance(triplets, MinedSet):
        if triplets.triplets is None:
            raise ValueError("mined set carries no triplets")
        return triplets.triplets
    return list(triplets)


def triplet_loss(
    batch: EmbeddingBatch,
    triplets,
    cfg: LossConfig,
    sim: np.ndarray | None = None,
) -> LossOutput:
    """Margin ranking on (anchor, positive, negative) triplets.

    Per triplet: max(S_ik - S_ij + margin, 0), pushing the negative
    similarity below the positive one by at least the margin; the total
    is the mean over triplets.
    """
    s = _resolve_sim(batch, sim)
    trips = _as_triplets(triplets)
    if not trips:
        return LossOutput(0.0, np.zeros_like(batch.rows), degenerate=True)

    weights = np.zeros_like(s)
    value = 0.0
    for i, j, k in trips:
        term = s[i, k] - s[i, j] + cfg.margin
        if term > 0.0:
            value += term
            weights[i, k] += 1.0
            weights[i, j] -= 1.0
    value /= len(trips)
    weights /= len(trips)
    return LossOutput(value, _grad_from_similarity_weights(weights, batch))


def _anchor_sets(pairs, n: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if isinstance(pairs, PairLabels):
        ind = pairs.indicator
        pos = [np.nonzero(ind[i])[0] for i in range(n)]
        eye = np.eye(n, dtype=bool)
        neg = [np.nonzero(~ind[i] & ~eye[i])[0] for i in range(n)]
        return pos, neg
    pos_lists: list[list[int]] = [[] for _ in range(n)]
    neg_lists: list[list[int]] = [[] for _ in range(n)]
    for i, j in pairs.positive_pairs:
        pos_lists[i].append(j)
    for i, k in pairs.negative_pairs:
        neg_lists[i].append(k)
    return (
        [np.asarray(p, dtype=int) for p in pos_lists],
        [np.asarray(q, dtype=int) for q in neg_lists],
    )


def multi_similarity_loss(
    batch: EmbeddingBatch,
    pairs,
    cfg: LossConfig,
    sim: np.ndarray | None = None,
) -> LossOutput:
    """Softplus-weighted pair loss, averaged over all batch anchors.

    Per anchor i with positive set P_i and negative set N_i:

        (1/alpha) * log(1 + sum_{j in P_i} exp(-alpha (S_ij - m)))
      + (1/beta)  * log(1 + sum_{k in N_i} exp( beta  (S_ik - m)))

    `pairs` is either PairLabels (full supervision) or a MinedSet whose
    per-anchor sets were pre-filtered by a miner. Anchors with empty sets
    contribute zero.
    """
    s = _resolve_sim(batch, sim)
    n = len(batch)
    pos_sets, neg_sets = _anchor_sets(pairs, n)
    a, b, m = cfg.ms_alpha, cfg.ms_beta, cfg.margin

    weights = np.zeros_like(s)
    value = 0.0
    for i in range(n):
        pos = pos_sets[i]
        if len(pos) > 0:
            e = np.exp(-a * (s[i, pos] - m))
            t = float(e.sum())
            value += np.log1p(t) / a
            weights[i, pos] -= e / (n * (1.0 + t))
        neg = neg_sets[i]
        if len(neg) > 0:
            e = np.exp(b * (s[i, neg] - m))
            t = float(e.sum())
            value += np.log1p(t) / b
            weights[i, neg] += e / (n * (1.0 + t))
    value /= n
    return LossOutput(value, _grad_from_similarity_weights(weights, batch))


def weak_triplet_loss(
    batch: EmbeddingBatch,
    weak: WeakTuple,
    cfg: LossConfig,
    sim: np.ndarray | None = None,
) -> LossOutput:
    """Triplet loss against the best potential positive of one query.

    The positive pair is the potential positive most similar to the query
    (ties resolved toward the smallest index); each definite negative
    contributes a hinge term and the gradient flows only through the
    selected positive.
    """
    if not weak.potential_positives:
        raise ValueError("weak tuple has no potential positives")
    s = _resolve_sim(batch, sim)
    q = weak.query
    pos = np.asarray(weak.potential_positives, dtype=int)
    best = int(pos[np.argmax(s[q, pos])])

    weights = np.zeros_like(s)
    value = 0.0
    active = 0
    for nidx in weak.definite_negatives:
        term = s[q, nidx] - s[q, best] + cfg.margin
        if term > 0.0:
            value += term
            weights[q, nidx] += 1.0
            active += 1
    weights[q, best] -= active
    return LossOutput(value, _grad_from_similarity_weights(weights, batch))


def weak_tuples_from_labels(labels) -> list[WeakTuple]:
    """One in-batch weak tuple per anchor, from exact labels."""
    labels = np.asarray(labels)
    tuples = []
    for q in range(len(labels)):
        pos = [int(j) for j in np.nonzero(labels == labels[q])[0] if j != q]
        neg = [int(k) for k in np.nonzero(labels != labels[q])[0]]
        if pos and neg:
            tuples.append(WeakTuple(q, pos, neg))
    return tuples


def weak_tuples_from_geo(
    lats,
    lons,
    positive_radius_m: float = 10.0,
    negative_radius_m: float = 25.0,
) -> list[WeakTuple]:
    """Build weak tuples from raw geotags.

    Potential positives lie within `positive_radius_m` of the query,
    definite negatives beyond `negative_radius_m`; queries with no nearby
    candidate are skipped.
    """
    from .places import haversine

    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    n = len(lats)
    tuples = []
    for q in range(n):
        pos, neg = [], []
        for i in range(n):
            if i == q:
                continue
            d = haversine((lats[q], lons[q]), (lats[i], lons[i]))
            if d <= positive_radius_m:
                pos.append(i)
            elif d >= negative_radius_m:
                neg.append(i)
        if pos:
            tuples.append(WeakTuple(q, pos, neg))
    return tuples


def weak_triplet_total(
    batch: EmbeddingBatch,
    tuples: list[WeakTuple],
    cfg: LossConfig,
    sim: np.ndarray | None = None,
) -> LossOutput:
    """Mean of weak_triplet_loss over a list of tuples (batch-size independent)."""
    if not tuples:
        return LossOutput(0.0, np.zeros_like(batch.rows), degenerate=True)
    s = _resolve_sim(batch, sim)
    value = 0.0
    grad = np.zeros_like(batch.rows)
    for weak in tuples:
        out = weak_triplet_loss(batch, weak, cfg, sim=s)
        value += out.value
        grad += out.grad
    return LossOutput(value / len(tuples), grad / len(tuples))
