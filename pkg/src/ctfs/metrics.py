"""Confusion-matrix based IoU / mIoU evaluation."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .model import predict


class ConfusionMatrix:
    """C x C counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def accumulate(self, gt, pred) -> "ConfusionMatrix":
        gt = np.asarray(gt).astype(np.int64).ravel()
        pred = np.asarray(pred).astype(np.int64).ravel()
        if gt.shape != pred.shape:
            raise ValueError("gt and prediction shapes differ")
        c = self.num_classes
        for name, arr in (("gt", gt), ("prediction", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise ValueError(f"{name} holds a class index outside 0..{c - 1}")
        self.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm, include_background: bool = True):
    """Per-class IoU (NaN for classes absent from both gt and prediction) and their mean."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.sum() == 0:
        raise ValueError("confusion matrix is empty")
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    ious = np.full(len(inter), np.nan)
    present = union > 0
    ious[present] = inter[present] / union[present]
    considered = ious if include_background else ious[1:]
    if np.all(np.isnan(considered)):
        raise ValueError("no class present in the evaluated pixels")
    return ious.tolist(), float(np.nanmean(considered))


def evaluate_model(net, dataset, ids, batch_size: int = 16, per_image: bool = False):
    """Confusion matrix of ``net`` over the given labeled ids."""
    cm = ConfusionMatrix(dataset.num_classes)
    rows = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        imgs = np.stack([dataset.images[i] for i in chunk])
        preds = predict(net, imgs).argmax(dim=1).numpy()
        for sid, pred in zip(chunk, preds):
            gt = dataset.masks[sid]
            cm.accumulate(gt, pred)
            if per_image:
                one = ConfusionMatrix(dataset.num_classes).accumulate(gt, pred)
                rows.append((sid, miou(one)[1]))
    return (cm, rows) if per_image else cm


def write_report(path, class_names, ious, mean, checkpoint: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["checkpoint", "class", "iou"])
        for name, iou in zip(class_names, ious):
            w.writerow([checkpoint, name, "" if np.isnan(iou) else f"{iou:.6f}"])
        w.writerow([checkpoint, "mIoU", f"{mean:.6f}"])


def read_report_miou(path) -> float:
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            if row["class"] == "mIoU":
                return float(row["iou"])
    raise ValueError(f"{path} has no mIoU row")

