"""Segmentation metrics: confusion accumulation, IoU, prediction averaging."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfusionMatrix:
    """K x K counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise ValueError("counts must be non-negative K x K")
        self.counts = counts

    def update(self, labels: np.ndarray, predictions: np.ndarray, mask: np.ndarray | None = None) -> "ConfusionMatrix":
        """Accumulate masked points in place and return self."""
        labels = np.asarray(labels).reshape(-1)
        predictions = np.asarray(predictions).reshape(-1)
        if labels.shape != predictions.shape:
            raise ValueError("labels and predictions must have equal length")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(-1)
            labels, predictions = labels[mask], predictions[mask]
        if labels.size == 0:
            return self
        k = self.num_classes
        if labels.min() < 0 or labels.max() >= k or predictions.min() < 0 or predictions.max() >= k:
            raise ValueError(f"class ids must lie in [0, {k})")
        flat = labels.astype(np.int64) * k + predictions.astype(np.int64)
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class IouResult:
    per_class: np.ndarray  # nan for excluded classes
    miou: float
    excluded: list[int] = field(default_factory=list)  # absent in both labels and predictions


def iou(cm: ConfusionMatrix) -> IouResult:
    """Per-class IoU = TP / (TP + FP + FN); zero-denominator classes are
    excluded from the mean and reported in ``excluded``."""
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    denom = counts.sum(axis=1) + counts.sum(axis=0) - np.diag(counts)
    present = denom > 0
    per_class = np.full(cm.num_classes, np.nan)
    per_class[present] = tp[present] / denom[present]
    miou = float(per_class[present].mean()) if present.any() else float("nan")
    return IouResult(per_class, miou, list(np.flatnonzero(~present)))


def aggregate(softmax_a: np.ndarray, softmax_b: np.ndarray, tol: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise mean of two N x K distributions plus argmax predictions.

    Ties break toward the lower class index. Rows whose sums deviate from 1
    by more than ``tol`` are rejected.
    """
    a = np.asarray(softmax_a, dtype=np.float64)
    b = np.asarray(softmax_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("inputs must be equal-shape N x K")
    for name, x in (("first", a), ("second", b)):
        err = np.abs(x.sum(axis=1) - 1.0)
        if x.size and err.max() > tol:
            raise ValueError(f"{name} input rows do not sum to 1 (max deviation {err.max():.3g})")
    mean = 0.5 * (a + b)
    return mean, np.argmax(mean, axis=1)  # np.argmax returns the first maximal index
