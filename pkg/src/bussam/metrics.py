"""Acc / Se / Dice / IoU / Hausdorff evaluation on binary masks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_erosion
from scipy.spatial import cKDTree

from bussam.errors import UsageError

THRESHOLD = 0.5
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_masks(cls, pred: np.ndarray, gt: np.ndarray) -> "ConfusionCounts":
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise UsageError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        tp = int(np.count_nonzero(pred & gt))
        fp = int(np.count_nonzero(pred & ~gt))
        fn = int(np.count_nonzero(~pred & gt))
        return cls(tp=tp, tn=pred.size - tp - fp - fn, fp=fp, fn=fn)


def binarize(prob: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(prob) > threshold).astype(np.uint8)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (outside counts as background)."""
    m = np.asarray(mask, dtype=bool)
    return m & ~binary_erosion(m, structure=_CROSS, border_value=0)


def boundary_points(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(boundary(mask)).astype(np.float64)


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two non-empty point sets ``(n, 2)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if not len(a) or not len(b):
        raise UsageError("hausdorff distance needs two non-empty point sets")
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba))


@dataclass
class ImageMetrics:
    image: str
    acc: float
    se: float
    dice: float
    iou: float
    hd: float

    def row(self) -> list[str]:
        return [self.image] + [f"{v:.4f}" for v in (self.acc, self.se, self.dice, self.iou, self.hd)]


def _pct(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


def segmentation_metrics(pred: np.ndarray, gt: np.ndarray, spacing_mm: float = 1.0, image: str = "") -> ImageMetrics:
    """Metrics of a binary prediction against a binary ground truth.

    Percentages for Acc/Se/Dice/IoU, HD in millimetres. Both masks empty
    counts as a perfect result; exactly one empty gives HD equal to the
    image diagonal.
    """
    if spacing_mm <= 0:
        raise UsageError(f"spacing must be positive, got {spacing_mm}")
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    cc = ConfusionCounts.from_masks(pred, gt)
    acc = _pct(cc.tp + cc.tn, cc.total)
    p_empty, g_empty = not pred.any(), not gt.any()
    if p_empty and g_empty:
        return ImageMetrics(image, acc, 100.0, 100.0, 100.0, 0.0)
    se = _pct(cc.tp, cc.tp + cc.fn)
    dice = _pct(2 * cc.tp, 2 * cc.tp + cc.fp + cc.fn)
    iou = _pct(cc.tp, cc.tp + cc.fp + cc.fn)
    if p_empty or g_empty:
        hd = math.hypot(*pred.shape) * spacing_mm
    else:
        hd = hausdorff(boundary_points(pred), boundary_points(gt)) * spacing_mm
    return ImageMetrics(image, acc, se, dice, iou, hd)


@dataclass
class MetricsReport:
    per_image: list[ImageMetrics] = field(default_factory=list)

    def add(self, m: ImageMetrics) -> None:
        self.per_image.append(m)

    def mean(self) -> ImageMetrics:
        if not self.per_image:
            raise UsageError("no images in report")
        vals = np.array([[m.acc, m.se, m.dice, m.iou, m.hd] for m in self.per_image], dtype=np.float64)
        return ImageMetrics("MEAN", *(float(v) for v in vals.mean(axis=0)))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", "acc", "se", "dice", "iou", "hd_mm"])
            for m in self.per_image:
                w.writerow(m.row())
            w.writerow(self.mean().row())
