"""Confusion matrices, mIoU, connected components and region-size histograms."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from icnet import kernels
from icnet.errors import DataError, ShapeError

IGNORE = 255


def _check_pair(pred, gt):
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")


def confusion_matrix(pred, gt, num_classes, ignore=IGNORE):
    """``cm[g, p]`` counts pixels with ground truth g predicted as p.

    Pixels whose ground truth is ``ignore`` are excluded. Works on single maps
    or stacked batches.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_pair(pred, gt)
    keep = gt != ignore
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise DataError(f"ground truth class outside 0..{num_classes - 1}")
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise DataError(f"predicted class outside 0..{num_classes - 1}")
    return np.bincount(g * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(cm):
    """Per-class IoU; NaN for classes with zero union (absent from gt and pred)."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def mean_iou(iou):
    valid = ~np.isnan(iou)
    return float(iou[valid].mean()) if valid.any() else float("nan")


def miou(pred, gt, num_classes, ignore=IGNORE):
    """Returns ``(per-class IoU, mean IoU)`` with zero-union classes excluded."""
    iou = iou_from_confusion(confusion_matrix(pred, gt, num_classes, ignore))
    return iou, mean_iou(iou)


def metrics_csv(iou, names=None):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["class", "iou"])
    for c, v in enumerate(iou):
        wr.writerow([names[c] if names else c, "" if np.isnan(v) else f"{v:.6f}"])
    wr.writerow(["mIoU", f"{mean_iou(np.asarray(iou)):.6f}"])
    return buf.getvalue()


def connected_components(label, ignore=IGNORE, connectivity=4):
    """Same-class connected regions.

    Returns ``(ids, sizes)``: ``ids`` is an int64 map with region ids numbered
    in first-visit row-major order and -1 on ignore pixels; ``sizes[r]`` is
    the pixel count of region r.
    """
    label = np.ascontiguousarray(label, dtype=np.int64)
    if label.ndim != 2:
        raise ShapeError(f"label map must be 2-D, got {label.shape}")
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    ids, sizes = kernels.label_components(label, ignore, connectivity)
    return np.asarray(ids), np.asarray(sizes)


@dataclass
class RegionHistogram:
    """Per-size-bin region count and summed accuracy; bin b holds sizes
    ``b*K + 1 .. (b+1)*K``. Empty bins have NaN mean accuracy."""

    bins: int = 30
    interval: int = 3000
    counts: np.ndarray = field(default=None)
    sums: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.bins, np.int64)
        if self.sums is None:
            self.sums = np.zeros(self.bins, np.float64)

    @property
    def cap(self):
        return self.bins * self.interval

    @property
    def mean_acc(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.counts > 0, self.sums / np.maximum(self.counts, 1), np.nan)

    def populated(self):
        return np.flatnonzero(self.counts > 0)

    def add_regions(self, sizes, accs):
        sizes = np.asarray(sizes, np.int64)
        keep = (sizes >= 1) & (sizes <= self.cap)
        idx = (sizes[keep] + self.interval - 1) // self.interval - 1
        np.add.at(self.counts, idx, 1)
        np.add.at(self.sums, idx, np.asarray(accs, np.float64)[keep])
        return self

    def merge(self, other):
        if (self.bins, self.interval) != (other.bins, other.interval):
            raise ValueError("histograms use different binning")
        return RegionHistogram(self.bins, self.interval, self.counts + other.counts, self.sums + other.sums)

    def difference(self, other):
        """Per-bin ``mean_acc(self) - mean_acc(other)``; NaN where either is empty."""
        if (self.bins, self.interval) != (other.bins, other.interval):
            raise ValueError("histograms use different binning")
        return self.mean_acc - other.mean_acc

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["bin", "lo", "hi", "count", "mean_acc"])
        for b, (n, m) in enumerate(zip(self.counts, self.mean_acc)):
            wr.writerow([b, b * self.interval + 1, (b + 1) * self.interval, int(n), "" if n == 0 else repr(float(m))])
        return buf.getvalue()


def region_accuracies(gt, pred, source="gt", ignore=IGNORE, connectivity=4):
    """Sizes S_i and accuracies p_i = s_i / S_i of the regions of one map.

    With ``source="gt"`` regions come from the ground truth; with ``"pred"``
    from the prediction, counting only pixels whose ground truth is valid.
    """
    gt, pred = np.asarray(gt), np.asarray(pred)
    _check_pair(pred, gt)
    if source not in ("gt", "pred"):
        raise ValueError("source must be 'gt' or 'pred'")
    valid = gt != ignore
    if source == "gt":
        ids, sizes = connected_components(gt, ignore, connectivity)
        hits = np.bincount(ids[valid & (pred == gt)], minlength=len(sizes))
        return sizes, hits / np.maximum(sizes, 1)
    ids, _ = connected_components(pred, ignore, connectivity)
    n = int(ids.max()) + 1 if ids.size else 0
    inside = valid & (ids >= 0)
    sizes = np.bincount(ids[inside], minlength=n)
    hits = np.bincount(ids[inside & (pred == gt)], minlength=n)
    keep = sizes > 0
    return sizes[keep], hits[keep] / sizes[keep]


def region_accuracy_histogram(gt, pred, bins=30, interval=3000, source="gt", ignore=IGNORE, connectivity=4, hist=None):
    """Accumulate region accuracies of one map or a stack of maps into a histogram."""
    hist = hist or RegionHistogram(bins, interval)
    gt, pred = np.asarray(gt), np.asarray(pred)
    _check_pair(pred, gt)
    maps = zip(gt, pred) if gt.ndim == 3 else [(gt, pred)]
    for g, p in maps:
        sizes, accs = region_accuracies(g, p, source, ignore, connectivity)
        hist.add_regions(sizes, accs)
    return hist


def front_back_gain(diff, counts_a, counts_b):
    """Mean of ``diff`` over the smallest third and the largest third of bins
    populated in both histograms. Returns ``(front, back)``."""
    both = np.flatnonzero((counts_a > 0) & (counts_b > 0))
    if len(both) < 2:
        raise ValueError("need at least two populated bins")
    third = max(1, len(both) // 3)
    return float(diff[both[:third]].mean()), float(diff[both[-third:]].mean())
