"""Confusion-matrix accounting and the segmentation metrics derived from it:
per-class IoU, mean IoU over classes with nonzero union, and overall accuracy.
"""
from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    """K x K pixel counts; counts[t][p] = pixels of true class t predicted p."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, true: np.ndarray) -> "ConfusionMatrix":
        """Accumulate one prediction/reference mask pair (equal extents)."""
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise ValueError(f"mask extents differ: pred {pred.shape} vs true {true.shape}")
        k = self.num_classes
        for name, arr in (("pred", pred), ("true", true)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                bad = int(arr.min()) if arr.min() < 0 else int(arr.max())
                raise ValueError(f"{name} mask contains class id {bad} outside [0,{k})")
        flat = true.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("confusion matrices have different class counts")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _require_nonempty(self):
        if self.total == 0:
            raise ValueError("confusion matrix is empty")

    def per_class_iou(self) -> np.ndarray:
        """IoU_k = diag_k / (row_k + col_k - diag_k); NaN where the union is 0."""
        self._require_nonempty()
        diag = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=1) + self.counts.sum(axis=0) - np.diag(self.counts)
        with np.errstate(invalid="ignore"):
            return np.where(union > 0, diag / union, np.nan)

    def miou(self) -> float:
        """Mean IoU over classes present in truth or prediction."""
        iou = self.per_class_iou()
        return float(np.nanmean(iou))

    def oa(self) -> float:
        """Overall accuracy: trace / total, in [0, 1]."""
        self._require_nonempty()
        return float(np.trace(self.counts) / self.total)


def update_confusion(cm: ConfusionMatrix, pred: np.ndarray, true: np.ndarray) -> ConfusionMatrix:
    return cm.update(pred, true)


def miou(cm: ConfusionMatrix) -> float:
    return cm.miou()


def oa(cm: ConfusionMatrix) -> float:
    return cm.oa()


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    return cm.per_class_iou()


def metrics_report(cm: ConfusionMatrix) -> dict:
    """Machine-readable record keyed like the evaluation tables (mIoU, OA%)."""
    iou = cm.per_class_iou()
    return {
        "mIoU": cm.miou(),
        "OA%": 100.0 * cm.oa(),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "pixels": cm.total,
    }
