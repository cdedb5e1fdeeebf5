"""Unit-norm descriptors and their pairwise cosine similarities.

Descriptors are constrained to the unit hypersphere, so the cosine
similarity of two descriptors is exactly their inner product. Everything
here accumulates in float64 regardless of input dtype so that the
symmetry and range guarantees of the similarity matrix hold to tight
tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ZeroNormError

NORM_EPS = 1e-12
UNIT_TOL = 1e-6


def l2_normalize(v: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Return v / ||v||, raising ZeroNormError when ||v|| <= eps."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n <= eps:
        raise ZeroNormError(f"cannot normalize vector with norm {n:.3e}")
    return v / n


def normalize_rows(m: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Row-wise L2 normalization of a 2-D array."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms <= eps):
        bad = int(np.argmin(norms))
        raise ZeroNormError(f"row {bad} has norm {norms[bad]:.3e}")
    return m / norms[:, None]


def rows_are_unit(m: np.ndarray, tol: float = UNIT_TOL) -> bool:
    norms = np.linalg.norm(np.asarray(m, dtype=np.float64), axis=1)
    return bool(np.all(np.abs(norms - 1.0) <= tol))


@dataclass
class EmbeddingBatch:
    """N descriptors with aligned integer place labels.

    `rows` is an (N, D) float64 array. When `normalized` is True every
    row is unit norm (enforced at construction).
    """

    rows: np.ndarray
    labels: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2:
            raise ValueError(f"rows must be 2-D, got shape {self.rows.shape}")
        if self.labels.shape != (self.rows.shape[0],):
            raise ValueError("labels must align with rows")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("descriptor entries must be finite")
        if self.normalized and not rows_are_unit(self.rows):
            raise ValueError("rows flagged normalized but are not unit norm")

    @classmethod
    def from_raw(cls, rows: np.ndarray, labels) -> "EmbeddingBatch":
        """Normalize raw row vectors onto the unit sphere."""
        return cls(normalize_rows(rows), np.asarray(labels), normalized=True)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def similarity_matrix(batch: EmbeddingBatch) -> np.ndarray:
    """All pairwise inner products of a normalized batch, as an (N, N) array.

    Rejects batches whose rows are not unit norm: on the hypersphere the
    inner product *is* the cosine similarity, and the matrix invariants
    (symmetry, unit diagonal, entries in [-1, 1]) only hold there.
    """
    if not rows_are_unit(batch.rows):
        raise ValueError("similarity_matrix requires unit-norm rows")
    z = np.asarray(batch.rows, dtype=np.float64)
    return z @ z.T


def check_similarity(s: np.ndarray, tol: float = UNIT_TOL) -> None:
    """Validate similarity-matrix invariants; raises ValueError on failure."""
    s = np.asarray(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {s.shape}")
    if not np.allclose(s, s.T, atol=tol):
        raise ValueError("similarity matrix is not symmetric")
    if not np.allclose(np.diag(s), 1.0, atol=tol):
        raise ValueError("similarity matrix diagonal is not 1")
    if np.any(s > 1.0 + tol) or np.any(s < -1.0 - tol):
        raise ValueError("similarity entries outside [-1, 1]")
