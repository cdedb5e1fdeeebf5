"""Online in-batch pair and triplet selection.

Mining runs on the batch similarity matrix right after the forward pass
and picks the informative pairs the loss should see. All selection is
deterministic: anchors are scanned in index order and ties break toward
the smallest index, so identical inputs always yield identical mined sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MinedSet:
    """Ordered pairs (and optionally triplets) selected within a batch.

    positive_pairs: (anchor, positive) index pairs sharing a label;
    negative_pairs: (anchor, negative) pairs with differing labels;
    triplets: (anchor, positive, negative), present for triplet miners;
    skipped_anchors: anchors that had no positive or no negative in batch.
    """

    positive_pairs: list[tuple[int, int]] = field(default_factory=list)
    negative_pairs: list[tuple[int, int]] = field(default_factory=list)
    triplets: list[tuple[int, int, int]] | None = None
    skipped_anchors: list[int] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not self.positive_pairs and not self.negative_pairs

    def stats(self) -> dict[str, int]:
        return {
            "positives": len(self.positive_pairs),
            "negatives": len(self.negative_pairs),
            "triplets": 0 if self.triplets is None else len(self.triplets),
            "skipped_anchors": len(self.skipped_anchors),
        }


def _label_masks(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    return same, diff


def enumerate_pairs(labels: np.ndarray) -> MinedSet:
    """Every ordered positive and negative pair in the batch.

    For a P x K batch this yields P*K*(K-1) positives and P*K*(P-1)*K
    negatives: each sample acts as query, positive and negative at once.
    """
    labels = np.asarray(labels)
    if labels.size < 2:
        raise ValueError("need at least 2 samples to form pairs")
    same, diff = _label_masks(labels)
    pos = [(int(i), int(j)) for i, j in zip(*np.nonzero(same))]
    neg = [(int(i), int(k)) for i, k in zip(*np.nonzero(diff))]
    return MinedSet(positive_pairs=pos, negative_pairs=neg)


def hardest_mining(sim: np.ndarray, labels: np.ndarray) -> MinedSet:
    """One triplet per anchor: least similar positive, most similar negative.

    Anchors without any positive or any negative in the batch contribute
    nothing and are recorded in skipped_anchors.
    """
    sim = np.asarray(sim, dtype=np.float64)
    labels = np.asarray(labels)
    same, diff = _label_masks(labels)
    out = MinedSet(triplets=[])
    for i in range(len(labels)):
        pos_idx = np.nonzero(same[i])[0]
        neg_idx = np.nonzero(diff[i])[0]
        if len(pos_idx) == 0 or len(neg_idx) == 0:
            out.skipped_anchors.append(i)
            continue
        # argmin/argmax return the first occurrence, i.e. the smallest index
        j = int(pos_idx[np.argmin(sim[i, pos_idx])])
        k = int(neg_idx[np.argmax(sim[i, neg_idx])])
        out.positive_pairs.append((i, j))
        out.negative_pairs.append((i, k))
        out.triplets.append((i, j, k))
    return out


def ms_mining(sim: np.ndarray, labels: np.ndarray, epsilon: float = 0.1) -> MinedSet:
    """Keep pairs that are informative relative to the opposite set.

    Per anchor i, a negative (i, k) survives iff its similarity exceeds
    the hardest (lowest) positive similarity minus epsilon, and a positive
    (i, j) survives iff its similarity is below the hardest (highest)
    negative similarity plus epsilon. Anchors lacking either set yield no
    pairs.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    sim = np.asarray(sim, dtype=np.float64)
    labels = np.asarray(labels)
    same, diff = _label_masks(labels)
    out = MinedSet()
    for i in range(len(labels)):
        pos_idx = np.nonzero(same[i])[0]
        neg_idx = np.nonzero(diff[i])[0]
        if len(pos_idx) == 0 or len(neg_idx) == 0:
            out.skipped_anchors.append(i)
            continue
        min_pos = sim[i, pos_idx].min()
        max_neg = sim[i, neg_idx].max()
        for k in neg_idx:
            if sim[i, k] > min_pos - epsilon:
                out.negative_pairs.append((i, int(k)))
        for j in pos_idx:
            if sim[i, j] < max_neg + epsilon:
                out.positive_pairs.append((i, int(j)))
    return out
