"""Binary-classification metrics for predicted scaling fields.

The positive class is "void". Scores are 1 - gamma so that more void-like
nodes rank higher, which keeps average precision meaningful for small voids
inside a large intact domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ScalarField

__all__ = [
    "PrCurve",
    "binarize_labels",
    "void_scores",
    "pr_curve",
    "average_precision",
    "average_precision_score",
]

VOID_LABEL_THRESHOLD = 0.5


@dataclass(frozen=True)
class PrCurve:
    """Operating points swept over descending unique score thresholds."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def __post_init__(self):
        t, p, r = (np.asarray(a, dtype=np.float64) for a in
                   (self.thresholds, self.precision, self.recall))
        if not (t.shape == p.shape == r.shape) or t.ndim != 1:
            raise ValueError("thresholds, precision, recall must be equal-length 1D")
        if np.any(np.diff(t) >= 0):
            raise ValueError("thresholds must be strictly descending")
        if np.any(np.diff(r) < 0):
            raise ValueError("recall must be non-decreasing along the sweep")


def _values(field_or_array) -> np.ndarray:
    if isinstance(field_or_array, ScalarField):
        return field_or_array.values
    return np.asarray(field_or_array, dtype=np.float64).ravel()


def binarize_labels(gamma_true) -> np.ndarray:
    """True where the field marks a void (value strictly below 0.5)."""
    return _values(gamma_true) < VOID_LABEL_THRESHOLD


def void_scores(pred) -> np.ndarray:
    return 1.0 - _values(pred)


def pr_curve(pred, labels) -> PrCurve:
    """Precision-recall sweep of the void scores against boolean labels."""
    scores = void_scores(pred)
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: {scores.shape} scores vs {labels.shape} labels")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("no positive labels: recall is undefined")

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    hit = labels[order].astype(np.float64)
    tp = np.cumsum(hit)
    pp = np.arange(1, s.size + 1, dtype=np.float64)
    # collapse ties: keep the last (complete) count of each equal-score block
    last = np.ones(s.size, dtype=bool)
    last[:-1] = s[:-1] != s[1:]
    return PrCurve(s[last], tp[last] / pp[last], tp[last] / n_pos)


def average_precision(curve: PrCurve) -> float:
    """Step-sum of the curve: sum_n (R_n - R_{n-1}) * P_n with R_{-1} = 0."""
    r_prev = np.concatenate([[0.0], curve.recall[:-1]])
    return float(np.sum((curve.recall - r_prev) * curve.precision))


def average_precision_score(pred, labels) -> float:
    return average_precision(pr_curve(pred, labels))
