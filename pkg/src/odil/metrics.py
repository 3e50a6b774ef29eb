"""Accuracy matrix and the two continual-learning summaries.

``A[t][s]`` is the accuracy on the s-th learned domain after step t. Steps
and domains are 1-based, matching how results are tabulated.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DataError(f"{predictions.shape[0]} predictions vs {labels.shape[0]} labels")
    if labels.size == 0:
        raise DataError("accuracy of an empty set is undefined")
    return float((predictions == labels).mean())


class AccuracyMatrix:
    """Lower-triangular accuracy matrix, filled one row per step."""

    def __init__(self, domain_ids=None):
        self.rows: list[list[float]] = []
        self.domain_ids: list = list(domain_ids) if domain_ids is not None else []

    @classmethod
    def from_rows(cls, rows, domain_ids=None) -> "AccuracyMatrix":
        m = cls(domain_ids)
        for row in rows:
            m.append_row(row)
        return m

    def append_row(self, row) -> None:
        row = [float(v) for v in row]
        t = len(self.rows) + 1
        if len(row) != t:
            raise DataError(f"row {t} must have exactly {t} entries, got {len(row)}")
        if any(not 0.0 <= v <= 1.0 for v in row):
            raise DataError(f"row {t}: accuracies must lie in [0, 1]")
        self.rows.append(row)

    @property
    def steps(self) -> int:
        return len(self.rows)

    def __getitem__(self, ts):
        t, s = ts
        return self.rows[t - 1][s - 1]

    def _check_step(self, t):
        if not 1 <= t <= self.steps:
            raise DataError(f"step {t} not available (matrix has {self.steps} complete rows)")

    def to_list(self) -> list[list[float]]:
        return [list(r) for r in self.rows]


def average_accuracy(matrix: AccuracyMatrix, t: int) -> float:
    """Unweighted mean of row t."""
    matrix._check_step(t)
    return float(np.mean(matrix.rows[t - 1]))


def average_forgetting(matrix: AccuracyMatrix, t: int) -> float:
    """Mean over s < t of A[s][s] - A[t][s]; zero at t = 1. Can be negative."""
    matrix._check_step(t)
    if t == 1:
        return 0.0
    drops = [matrix.rows[s - 1][s - 1] - matrix.rows[t - 1][s - 1] for s in range(1, t)]
    return float(np.mean(drops))


def summarize(matrix: AccuracyMatrix) -> tuple[list[float], list[float]]:
    steps = range(1, matrix.steps + 1)
    return [average_accuracy(matrix, t) for t in steps], [average_forgetting(matrix, t) for t in steps]
