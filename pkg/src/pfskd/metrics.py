"""Confusion-matrix based segmentation metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np


class EmptyConfusionError(ValueError):
    """mIoU requested on a matrix with no counted pixels."""


@dataclass
class ConfusionMatrix:
    num_classes: int
    ignore_index: int = 255
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and label {gt.shape} shapes differ")
        keep = gt != self.ignore_index
        p = pred[keep].astype(np.int64)
        g = gt[keep].astype(np.int64)
        c = self.num_classes
        if p.size and (p.min() < 0 or p.max() >= c or g.max() >= c):
            raise ValueError(f"class index out of range for {c} classes")
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.ignore_index, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt) -> None:
    cm.accumulate(pred, gt)


@dataclass
class SegScores:
    per_class_iou: list  # NaN for classes absent from both prediction and ground truth
    mean_iou: float
    pixel_acc: float


def miou(cm: ConfusionMatrix) -> SegScores:
    """IoU_k = tp / (gt_k + pred_k - tp); classes with an empty union are left out of the mean."""
    counts = cm.counts.astype(np.float64)
    if counts.sum() == 0:
        raise EmptyConfusionError("no pixels accumulated")
    tp = np.diag(counts)
    union = counts.sum(1) + counts.sum(0) - tp
    present = union > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    return SegScores(iou.tolist(), float(iou[present].mean()), float(tp.sum() / counts.sum()))


def report_csv(scores: SegScores, class_names=None) -> str:
    names = class_names or [f"class{i}" for i in range(len(scores.per_class_iou))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for n, v in zip(names, scores.per_class_iou):
        w.writerow([f"iou_{n}", "" if np.isnan(v) else f"{v:.6f}"])
    w.writerow(["mean_iou", f"{scores.mean_iou:.6f}"])
    w.writerow(["pixel_acc", f"{scores.pixel_acc:.6f}"])
    return buf.getvalue()


def report_table(scores: SegScores, class_names=None) -> str:
    names = class_names or [f"class{i}" for i in range(len(scores.per_class_iou))]
    width = max(len(n) for n in list(names) + ["pixel acc"])
    lines = [f"{'class':<{width}}  IoU"]
    for n, v in zip(names, scores.per_class_iou):
        lines.append(f"{n:<{width}}  {'  n/a' if np.isnan(v) else f'{v:.4f}'}")
    lines.append(f"{'mIoU':<{width}}  {scores.mean_iou:.4f}")
    lines.append(f"{'pixel acc':<{width}}  {scores.pixel_acc:.4f}")
    return "\n".join(lines)
