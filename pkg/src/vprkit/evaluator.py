"""Retrieval evaluation (recall@k) and PCA/whitening compression.

Retrieval is exhaustive cosine search over unit-norm descriptors, which
keeps the evaluator exact at desk scale. Ground truth comes either from
place labels or from a geodesic radius around each query (25 m by
default). Queries with no correct reference at all are excluded from the
recall denominator and reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import l2_normalize, rows_are_unit
from .places import haversine
from .tensorio import DescriptorSet

DEFAULT_GEO_RADIUS_M = 25.0


@dataclass
class GroundTruthMatcher:
    """Decides which references count as correct for a query.

    mode "label": same place_id. mode "geo": within radius_m meters.
    """

    mode: str = "geo"
    radius_m: float = DEFAULT_GEO_RADIUS_M

    def __post_init__(self):
        if self.mode not in ("geo", "label"):
            raise ValueError(f"unknown ground-truth mode {self.mode!r}")
        if self.radius_m < 0:
            raise ValueError("radius_m must be >= 0")

    def matches(self, queries: DescriptorSet, refs: DescriptorSet) -> list[np.ndarray]:
        """Per query, the array of correct reference indices."""
        if self.mode == "label":
            return [
                np.nonzero(refs.place_ids == pid)[0] for pid in queries.place_ids
            ]
        out = []
        for qlat, qlon in zip(queries.lats, queries.lons):
            dists = np.array(
                [haversine((qlat, qlon), (rlat, rlon)) for rlat, rlon in zip(refs.lats, refs.lons)]
            )
            out.append(np.nonzero(dists <= self.radius_m)[0])
        return out


def retrieve_topk(query: np.ndarray, refs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k most cosine-similar reference rows, best first.

    Both sides must be unit norm. Ties resolve toward the smaller index.
    """
    refs = np.asarray(refs, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64).ravel()
    if not 1 <= k <= refs.shape[0]:
        raise ValueError(f"k={k} out of range for {refs.shape[0]} references")
    if not rows_are_unit(refs) or not rows_are_unit(query[None, :]):
        raise ValueError("retrieve_topk requires unit-norm descriptors")
    scores = refs @ query
    order = np.argsort(-scores, kind="stable")
    return order[:k]


@dataclass
class QueryTrace:
    query_id: str
    retrieved: list[str]
    first_correct_rank: int | None  # 1-based; None when nothing correct was ranked


@dataclass
class RecallReport:
    ks: list[int]
    recall_at: dict[int, float]
    per_query: list[QueryTrace] = field(default_factory=list)
    queries_evaluated: int = 0
    queries_excluded: int = 0
    label: str = ""

    def __post_init__(self):
        values = [self.recall_at[k] for k in sorted(self.ks)]
        if any(v < 0.0 or v > 1.0 for v in values):
            raise ValueError("recall values must lie in [0, 1]")
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("recall must be nondecreasing in k")

    def to_kv_lines(self) -> str:
        lines = [
            f"label={self.label}",
            "ks=" + ",".join(str(k) for k in self.ks),
            f"queries_evaluated={self.queries_evaluated}",
            f"queries_excluded={self.queries_excluded}",
        ]
        lines += [f"recall@{k}={self.recall_at[k]!r}" for k in self.ks]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv_lines(cls, text: str) -> "RecallReport":
        fields: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key] = value
        ks = [int(k) for k in fields["ks"].split(",") if k]
        recall_at = {k: float(fields[f"recall@{k}"]) for k in ks}
        return cls(
            ks=ks,
            recall_at=recall_at,
            queries_evaluated=int(fields.get("queries_evaluated", 0)),
            queries_excluded=int(fields.get("queries_excluded", 0)),
            label=fields.get("label", ""),
        )

    def to_text(self) -> str:
        head = " ".join(f"R@{k:<6d}" for k in self.ks)
        vals = " ".join(f"{self.recall_at[k]:<8.4f}" for k in self.ks)
        return (
            f"{head}\n{vals}\n"
            f"queries evaluated: {self.queries_evaluated}, "
            f"excluded (no valid ground truth): {self.queries_excluded}\n"
        )


def recall_at_k(
    queries: DescriptorSet,
    refs: DescriptorSet,
    gt: GroundTruthMatcher,
    ks: list[int],
    label: str = "",
) -> RecallReport:
    """Fraction of queries whose top-k retrieval contains a correct reference.

    A query is counted as solved at k when at least one of its k nearest
    references (by cosine similarity) is a ground-truth match. Queries
    with no match anywhere in the reference set are excluded from the
    denominator; their count is reported.
    """
    if len(queries) == 0:
        raise ValueError("empty query set")
    if not ks or any(k < 1 for k in ks):
        raise ValueError("ks must be positive integers")
    ks = sorted(set(int(k) for k in ks))
    max_k = min(max(ks), len(refs))

    match_lists = gt.matches(queries, refs)
    traces: list[QueryTrace] = []
    solved_at = np.zeros(len(ks), dtype=np.int64)
    evaluated = 0
    excluded = 0
    for qi in range(len(queries)):
        matches = set(int(m) for m in match_lists[qi])
        if not matches:
            excluded += 1
            traces.append(QueryTrace(queries.ids[qi], [], None))
            continue
        evaluated += 1
        top = retrieve_topk(queries.vectors[qi], refs.vectors, max_k)
        rank = None
        for pos, ridx in enumerate(top, start=1):
            if int(ridx) in matches:
                rank = pos
                break
        traces.append(
            QueryTrace(queries.ids[qi], [refs.ids[int(r)] for r in top], rank)
        )
        if rank is not None:
            for ki, k in enumerate(ks):
                if rank <= k:
                    solved_at[ki] += 1

    if evaluated == 0:
        raise ValueError("no query has any ground-truth match in the reference set")
    recall = {k: float(solved_at[ki]) / evaluated for ki, k in enumerate(ks)}
    return RecallReport(
        ks=ks,
        recall_at=recall,
        per_query=traces,
        queries_evaluated=evaluated,
        queries_excluded=excluded,
        label=label,
    )


# ---------------------------------------------------------------------------
# PCA + whitening
# ---------------------------------------------------------------------------

@dataclass
class PCAModel:
    """Whitening projection learned from a training sample.

    Row i of `projection` is the i-th principal axis scaled by
    1/sqrt(eigenvalue_i + epsilon), so projected training data has
    identity covariance. Eigenvector signs follow a fixed convention
    (first nonzero component positive) making fits byte-reproducible.
    """

    mean: np.ndarray
    projection: np.ndarray
    eigenvalues: np.ndarray
    epsilon: float = 1e-9

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        if self.projection.shape != (len(self.eigenvalues), len(self.mean)):
            raise ValueError("projection shape inconsistent with mean/eigenvalues")
        if np.any(self.eigenvalues < 0):
            raise ValueError("eigenvalues must be nonnegative")
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ValueError("eigenvalues must be nonincreasing")

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def in_dim(self) -> int:
        return self.projection.shape[1]

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """Centered, whitened coordinates (no final normalization)."""
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) @ self.projection.T


def _fix_eigenvector_signs(vectors: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Columns flipped so the first non-negligible component is positive."""
    out = vectors.copy()
    for col in range(out.shape[1]):
        v = out[:, col]
        nz = np.nonzero(np.abs(v) > tol)[0]
        if len(nz) and v[nz[0]] < 0:
            out[:, col] = -v
    return out


def pca_whiten_fit(training: np.ndarray, out_dim: int, epsilon: float = 1e-9) -> PCAModel:
    """Learn a whitening transform from training descriptors.

    Centers the data, eigendecomposes the sample covariance (n-1
    denominator) and keeps the out_dim leading axes, each scaled by
    1/sqrt(eigenvalue + epsilon). Requires more samples than output
    dimensions and a covariance of rank at least out_dim.
    """
    x = np.asarray(training, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("training data must be 2-D")
    n, d = x.shape
    if not 1 <= out_dim <= d:
        raise ValueError(f"out_dim {out_dim} out of range for dimension {d}")
    if n <= out_dim:
        raise ValueError(f"need more than {out_dim} training samples, got {n}")

    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = _fix_eigenvector_signs(eigvecs[:, order])

    rank = int(np.sum(eigvals > max(eigvals[0], 0.0) * 1e-10))
    if out_dim > rank:
        raise ValueError(f"out_dim {out_dim} exceeds training sample rank {rank}")

    top_vals = eigvals[:out_dim]
    projection = eigvecs[:, :out_dim].T / np.sqrt(top_vals + epsilon)[:, None]
    return PCAModel(mean, projection, top_vals, epsilon)


def pca_transform(model: PCAModel, v: np.ndarray) -> np.ndarray:
    """Project one descriptor and re-normalize to unit length."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape != (model.in_dim,):
        raise ValueError(f"descriptor has dim {v.shape[0]}, model expects {model.in_dim}")
    return l2_normalize(model.whiten(v))


def pca_transform_set(model: PCAModel, ds: DescriptorSet) -> DescriptorSet:
    """Apply pca_transform to every descriptor in a set, keeping metadata."""
    reduced = np.stack([pca_transform(model, row) for row in ds.vectors])
    return DescriptorSet(reduced, ds.ids, ds.lats, ds.lons, ds.place_ids)
