"""Segmentation and depth metrics, plus the inter-channel correlation statistic."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import MetricError, ShapeError
from .nn import IGNORE_INDEX
from .tensor import Tensor


class ConfusionMatrix:
    """C x C pixel counts; rows are ground truth, columns predictions."""

    def __init__(self, n_classes: int, ignore_index: int = IGNORE_INDEX):
        self.n_classes = n_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        valid = gt != self.ignore_index
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        c = self.n_classes
        if g.size and (g.min() < 0 or g.max() >= c or p.min() < 0 or p.max() >= c):
            raise MetricError(f"class ids outside [0, {c})")
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        out = ConfusionMatrix(self.n_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both prediction and truth."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> float:
        if self.total == 0:
            raise MetricError("no valid pixels")
        return float(np.nanmean(self.iou()))


def miou(pred, gt, n_classes: int, ignore_index: int = IGNORE_INDEX):
    """Return ``(per-class IoU, mean IoU)``; absent classes are NaN and skipped."""
    cm = ConfusionMatrix(n_classes, ignore_index).update(pred, gt)
    return cm.iou(), cm.miou()


@dataclass
class DepthMetrics:
    absrel: float
    sqrel: float
    rmse: float
    a1: float
    a2: float
    a3: float

    def as_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred, gt, valid=None) -> DepthMetrics:
    """AbsRel, SqRel, RMSE and the 1.25^k threshold accuracies over ``valid`` pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    valid = gt > 0 if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise MetricError("empty valid mask")
    p, g = pred[valid], gt[valid]
    if (g <= 0).any():
        raise MetricError("ground-truth depth must be positive on the valid mask")
    if (p <= 0).any():
        raise MetricError("predicted depth must be positive on the valid mask")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        absrel=float(np.mean(np.abs(diff) / g)),
        sqrel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        a1=float(np.mean(ratio < 1.25)),
        a2=float(np.mean(ratio < 1.25 ** 2)),
        a3=float(np.mean(ratio < 1.25 ** 3)),
    )


def inter_channel_correlation(layer) -> float:
    """Mean over samples and ordered channel pairs (i != c) of ``||X_i X_c^T||_1``."""
    x = np.asarray(layer.data if isinstance(layer, Tensor) else layer, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected N x C x H x W, got {x.shape}")
    n, c = x.shape[:2]
    if c < 2:
        raise MetricError("inter-channel correlation needs at least two channels")
    total = 0.0
    for sample in x:
        # prod[i, j] = X_i @ X_j^T, an H x H matrix per pair
        prod = np.einsum("ihw,jgw->ijhg", sample, sample)
        norms = np.abs(prod).sum(axis=(2, 3))
        total += norms.sum() - np.trace(norms)
    return float(total / (n * c * (c - 1)))
