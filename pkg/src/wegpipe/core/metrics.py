"""Segmentation metrics with ignore-label semantics."""
from __future__ import annotations

import logging
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from .errors import ShapeError, UsageError
from .label import IGNORE_LABEL

logger = logging.getLogger(__name__)


class MetricsReport(BaseModel):
    per_class_iou: List[Optional[float]]
    miou: Optional[float]
    ignored_fraction: float
    pixel_accuracy: Optional[float]
    evaluated_pixels: int
    missing: List[str] = []


class ConfusionMatrix:
    """(c+1) x (c+1) counts indexed [ground truth][prediction]; class 0 is background."""

    def __init__(self, num_classes: int) -> None:
        if num_classes < 1:
            raise UsageError("a confusion matrix needs at least one foreground class")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
        self.total_ignored = 0

    @property
    def total_pixels(self) -> int:
        return int(self.counts.sum()) + self.total_ignored

    def _check(self, values: np.ndarray, role: str) -> None:
        bad = (values > self.num_classes) & (values != IGNORE_LABEL)
        if (values < 0).any() or bad.any():
            raise UsageError(f"{role} holds values outside 0..{self.num_classes} and {IGNORE_LABEL}")

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred).astype(np.int64)
        gt = np.asarray(gt).astype(np.int64)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        self._check(pred, "prediction")
        self._check(gt, "ground truth")
        ignored = (gt == IGNORE_LABEL) | (pred == IGNORE_LABEL)
        self.total_ignored += int(ignored.sum())
        size = self.num_classes + 1
        keep = ~ignored
        flat = gt[keep] * size + pred[keep]
        self.counts += np.bincount(flat, minlength=size * size).reshape(size, size)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different class counts")
        merged = ConfusionMatrix(self.num_classes)
        merged.counts = self.counts + other.counts
        merged.total_ignored = self.total_ignored + other.total_ignored
        return merged

    def iou(self) -> List[Optional[float]]:
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        return [float(t / u) if u > 0 else None for t, u in zip(tp, union)]

    def report(self, missing: Optional[List[str]] = None) -> MetricsReport:
        mean, per_class = miou(self)
        evaluated = int(self.counts.sum())
        total = self.total_pixels
        return MetricsReport(
            per_class_iou=per_class,
            miou=mean,
            ignored_fraction=self.total_ignored / total if total else 0.0,
            pixel_accuracy=float(np.trace(self.counts) / evaluated) if evaluated else None,
            evaluated_pixels=evaluated,
            missing=list(missing or []),
        )


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def miou(cm: ConfusionMatrix) -> Tuple[Optional[float], List[Optional[float]]]:
    """Mean IoU over classes with non-zero union; None when every union is empty."""
    per_class = cm.iou()
    defined = [v for v in per_class if v is not None]
    return (float(np.mean(defined)) if defined else None), per_class
