"""Confusion-matrix construction and the derived classification metrics.

Rows index ground truth, columns index predictions. Rates with a zero
denominator are reported as None ("undefined") rather than 0 or NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateMarginals,
    EmptyInput,
    LabelOutOfRange,
    LengthMismatch,
)

LOGLOSS_CLAMP = 1e-15


@dataclass
class ConfusionMatrix:
    """K x K non-negative integer counts; truth on rows, predictions on columns."""

    k: int
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.k, self.k):
            raise LengthMismatch(f"counts shape {self.counts.shape} != ({self.k}, {self.k})")
        if (self.counts < 0).any():
            raise LabelOutOfRange("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merged_with(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Elementwise-sum merge for shard accumulation."""
        if other.k != self.k:
            raise LengthMismatch(f"cannot merge {other.k}-class into {self.k}-class matrix")
        return ConfusionMatrix(self.k, self.counts + other.counts)


@dataclass
class BinaryRates:
    """Rates of a 2x2 matrix; None marks an undefined (0/0) rate."""

    sensitivity: float | None
    specificity: float | None
    precision: float | None
    f_score: float | None
    accuracy: float | None


def confusion_matrix(truth, pred, k) -> ConfusionMatrix:
    truth = list(truth)
    pred = list(pred)
    if len(truth) != len(pred):
        raise LengthMismatch(f"{len(truth)} truth labels vs {len(pred)} predictions")
    if not truth:
        raise EmptyInput("no labelled samples")
    counts = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(truth, pred):
        if not (0 <= t < k) or not (0 <= p < k):
            raise LabelOutOfRange(f"label pair ({t}, {p}) outside [0, {k})")
        counts[t, p] += 1
    return ConfusionMatrix(k, counts)


def _ratio(num, den):
    return num / den if den > 0 else None


def binary_rates(cm: ConfusionMatrix) -> BinaryRates:
    """Sensitivity/specificity/precision/F/accuracy of a 2x2 matrix.

    Index 1 is the positive class: TP = counts[1][1], TN = counts[0][0],
    FP = counts[0][1], FN = counts[1][0].
    """
    if cm.k != 2:
        raise LengthMismatch(f"binary rates need a 2x2 matrix, got {cm.k}x{cm.k}")
    if cm.total == 0:
        raise EmptyInput("empty confusion matrix")
    tp = int(cm.counts[1, 1])
    tn = int(cm.counts[0, 0])
    fp = int(cm.counts[0, 1])
    fn = int(cm.counts[1, 0])
    sensitivity = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    precision = _ratio(tp, tp + fp)
    if precision is not None and sensitivity is not None and precision + sensitivity > 0:
        f_score = 2.0 * precision * sensitivity / (precision + sensitivity)
    else:
        f_score = None
    accuracy_ = (tp + tn) / cm.total
    return BinaryRates(sensitivity, specificity, precision, f_score, accuracy_)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyInput("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement: (observed - expected) / (1 - expected)."""
    total = cm.total
    if total == 0:
        raise EmptyInput("empty confusion matrix")
    observed = float(np.trace(cm.counts)) / total
    row = cm.counts.sum(axis=1).astype(np.float64)
    col = cm.counts.sum(axis=0).astype(np.float64)
    expected = float(row @ col) / (total * total)
    if expected == 1.0:
        raise DegenerateMarginals("expected accuracy is 1; kappa undefined")
    return (observed - expected) / (1.0 - expected)


def per_class_recall(cm: ConfusionMatrix) -> list:
    """Diagonal over row sum per class; None where the class has no samples."""
    recalls = []
    for c in range(cm.k):
        row = int(cm.counts[c].sum())
        recalls.append(_ratio(int(cm.counts[c, c]), row))
    return recalls


def logloss(probs, truth, mean=False) -> float:
    """Logarithmic loss summed over samples (a mean only if asked for).

    Probabilities are clamped to [1e-15, 1 - 1e-15] before the log.
    """
    probs = np.asarray(probs, dtype=np.float64)
    truth = list(truth)
    if probs.ndim != 2:
        raise LengthMismatch("probs must be (n, m)")
    if probs.shape[0] != len(truth):
        raise LengthMismatch(f"{probs.shape[0]} probability rows vs {len(truth)} labels")
    if len(truth) == 0:
        raise EmptyInput("no samples")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise LengthMismatch("probability rows must sum to 1")
    for t in truth:
        if not (0 <= t < probs.shape[1]):
            raise LabelOutOfRange(f"label {t} outside [0, {probs.shape[1]})")
    picked = probs[np.arange(len(truth)), truth]
    total = float(-np.log(np.clip(picked, LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP)).sum())
    return total / len(truth) if mean else total


def collapse_to_binary(cm: ConfusionMatrix, positive_from=1) -> ConfusionMatrix:
    """Collapse a K-class matrix to healthy (0) vs any stage >= positive_from."""
    counts = np.zeros((2, 2), dtype=np.int64)
    for t in range(cm.k):
        for p in range(cm.k):
            counts[int(t >= positive_from), int(p >= positive_from)] += cm.counts[t, p]
    return ConfusionMatrix(2, counts)


def metrics_report(cm: ConfusionMatrix, binary_collapse=False, notes=()) -> dict:
    """Structured metrics summary ready for JSON serialization."""
    report = {
        "confusion_matrix": cm.counts.tolist(),
        "num_classes": cm.k,
        "total": cm.total,
        "accuracy": accuracy(cm),
        "kappa": kappa(cm),
        "per_class_recall": per_class_recall(cm),
    }
    if binary_collapse and cm.k > 2:
        cm = collapse_to_binary(cm)
        report["binary_confusion_matrix"] = cm.counts.tolist()
    if cm.k == 2:
        rates = binary_rates(cm)
        report["binary_rates"] = {
            "sensitivity": rates.sensitivity,
            "specificity": rates.specificity,
            "precision": rates.precision,
            "f_score": rates.f_score,
            "accuracy": rates.accuracy,
        }
    if notes:
        report["notes"] = list(notes)
    return report
