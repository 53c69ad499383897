"""Weighted bag-of-terms vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class SparseVector:
    """Term ids strictly increasing, weights strictly positive."""

    terms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        terms = np.asarray(self.terms, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if terms.shape != weights.shape or terms.ndim != 1:
            raise ValueError("terms and weights must be 1-D arrays of equal length")
        if terms.size and np.any(np.diff(terms) <= 0):
            raise ValueError("term ids must be strictly increasing")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ValueError("sparse weights must be finite and strictly positive")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_dense(cls, row) -> "SparseVector":
        row = np.asarray(row, dtype=np.float64)
        nz = np.flatnonzero(row > 0)
        return cls(nz, row[nz])

    @classmethod
    def from_dict(cls, d: dict[int, float]) -> "SparseVector":
        items = sorted((int(k), float(v)) for k, v in d.items() if v > 0)
        return cls(np.array([k for k, _ in items], dtype=np.int64), np.array([v for _, v in items]))

    def to_dense(self, vocab_size: int) -> np.ndarray:
        out = np.zeros(vocab_size)
        out[self.terms] = self.weights
        return out

    def to_dict(self) -> dict[int, float]:
        return dict(zip(self.terms.tolist(), self.weights.tolist()))

    def __len__(self) -> int:
        return int(self.terms.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return np.array_equal(self.terms, other.terms) and np.array_equal(self.weights, other.weights)

    def dot(self, other: "SparseVector") -> float:
        common, i, j = np.intersect1d(self.terms, other.terms, assume_unique=True, return_indices=True)
        return float(np.dot(self.weights[i], other.weights[j])) if common.size else 0.0
