"""Segmentation metrics from a global confusion matrix.

Metrics cover classes 0..K (background included). A class absent from both
prediction and truth contributes IoU 1 by convention and is flagged. BER is
reported in percent and only defined for the binary case (K = 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValueCheckError


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def check(self, total: int):
        per_class = self.tp + self.fp + self.fn + self.tn
        assert (per_class == total).all()


@dataclass
class MetricReport:
    iou: np.ndarray              # per class, 0..K
    dice: np.ndarray
    miou: float
    accuracy: float
    ber: float | None            # percent; binary only
    empty_classes: tuple[int, ...] = ()

    def summary(self) -> str:
        parts = [f"mIoU={self.miou:.4f}", f"acc={self.accuracy:.4f}"]
        if self.ber is not None:
            parts.append(f"BER={self.ber:.2f}")
        parts.append("IoU=[" + " ".join(f"{v:.4f}" for v in self.iou) + "]")
        return " ".join(parts)


def confusion_matrix(pred: np.ndarray, true: np.ndarray, num_classes: int) -> np.ndarray:
    """(K+1, K+1) counts; rows are truth, columns prediction."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ShapeError(f"confusion_matrix: shapes {pred.shape} != {true.shape}")
    k1 = num_classes + 1
    p = pred.ravel().astype(np.int64)
    t = true.ravel().astype(np.int64)
    for name, v in (("pred", p), ("true", t)):
        if v.size and (v.min() < 0 or v.max() >= k1):
            raise ValueCheckError(f"confusion_matrix: {name} labels outside 0..{k1 - 1}")
    return np.bincount(t * k1 + p, minlength=k1 * k1).reshape(k1, k1)


def counts_from_confusion(cm: np.ndarray) -> ConfusionCounts:
    total = cm.sum()
    tp = np.diag(cm).astype(np.int64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def compute_metrics(pred_labels, true_labels, num_classes: int) -> MetricReport:
    cm = confusion_matrix(pred_labels, true_labels, num_classes)
    c = counts_from_confusion(cm)
    k1 = num_classes + 1

    iou = np.empty(k1)
    dice = np.empty(k1)
    empty = []
    for cls in range(k1):
        denom = c.tp[cls] + c.fp[cls] + c.fn[cls]
        if denom == 0:
            iou[cls] = 1.0
            dice[cls] = 1.0
            empty.append(cls)
        else:
            iou[cls] = c.tp[cls] / denom
            dice[cls] = 2 * c.tp[cls] / (2 * c.tp[cls] + c.fp[cls] + c.fn[cls])

    accuracy = float(np.diag(cm).sum() / cm.sum())
    ber = None
    if num_classes == 1:
        tpos = c.tp[1] + c.fn[1]
        tneg = c.tn[1] + c.fp[1]
        tpr = c.tp[1] / tpos if tpos else 1.0
        tnr = c.tn[1] / tneg if tneg else 1.0
        ber = float(100.0 * (1.0 - 0.5 * (tpr + tnr)))
    return MetricReport(iou=iou, dice=dice, miou=float(iou.mean()),
                        accuracy=accuracy, ber=ber,
                        empty_classes=tuple(empty))
