"""Region overlap metrics for label maps."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import N_CLASSES

CLASS_NAMES = ("background", "tumor", "fat", "mammary", "muscle")


@dataclass(frozen=True)
class RegionMetrics:
    """TPR/FPR are ``None`` when the class is absent from the truth."""

    tpr: float | None
    fpr: float | None
    iou: float


def _pair(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    return pred, truth


def region_counts(pred, truth, c):
    """``(|Ar & Am|, |Ar | Am|, |Am|)`` for class ``c``."""
    pred, truth = _pair(pred, truth)
    ar = pred == c
    am = truth == c
    return int(np.count_nonzero(ar & am)), int(np.count_nonzero(ar | am)), int(np.count_nonzero(am))


def _from_counts(inter, union, n_truth):
    iou = 1.0 if union == 0 else inter / union
    if n_truth == 0:
        return RegionMetrics(None, None, iou)
    return RegionMetrics(inter / n_truth, (union - n_truth) / n_truth, iou)


def metrics(pred, truth, c):
    """True positive ratio, false positive ratio and IoU of class ``c``.

    With ``Ar = {pred == c}`` and ``Am = {truth == c}``::

        TPR = |Ar & Am| / |Am|
        FPR = |(Ar | Am) - Am| / |Am|
        IoU = |Ar & Am| / |Ar | Am|

    IoU is 1 when both sets are empty.
    """
    return _from_counts(*region_counts(pred, truth, c))


def mean_iou(preds, truths, n_classes=N_CLASSES):
    """Per-class IoU from counts pooled over the whole set, and their mean.

    Returns ``(per_class, miou)`` where ``per_class`` has one entry per class.
    """
    preds = [np.asarray(p) for p in (preds if isinstance(preds, (list, tuple)) else list(preds))]
    truths = [np.asarray(t) for t in (truths if isinstance(truths, (list, tuple)) else list(truths))]
    if not preds or len(preds) != len(truths):
        raise ValueError(f"need a non-empty, paired set; got {len(preds)} predictions and {len(truths)} truths")
    inter = np.zeros(n_classes, np.int64)
    union = np.zeros(n_classes, np.int64)
    for p, t in zip(preds, truths):
        p, t = _pair(p, t)
        for c in range(n_classes):
            i, u, _ = region_counts(p, t, c)
            inter[c] += i
            union[c] += u
    per_class = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    return per_class, float(per_class.mean())


def pooled_metrics(preds, truths, c):
    """Class ``c`` metrics from counts pooled over a set of images."""
    inter = union = n_truth = 0
    for p, t in zip(preds, truths):
        i, u, n = region_counts(p, t, c)
        inter, union, n_truth = inter + i, union + u, n_truth + n
    return _from_counts(inter, union, n_truth)


def count_components(mask):
    """Number of 4-connected components of a boolean mask."""
    return int(ndimage.label(np.asarray(mask, bool))[1])
