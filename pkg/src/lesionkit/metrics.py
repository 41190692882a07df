"""Challenge scoring: thresholded Jaccard and balanced multi-class accuracy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imgcore import CLASSES, BinaryMask, ConfusionMatrix, DataError, ProbMap, read_class_table

SEG_THRESHOLD = 0.65


@dataclass(frozen=True)
class SegScore:
    raw_jaccard: float
    thresholded: float

    @classmethod
    def of(cls, pred: BinaryMask, gt: BinaryMask, threshold=SEG_THRESHOLD):
        j = jaccard(pred, gt)
        return cls(j, thresholded_jaccard(j, threshold))


def _mask_array(m):
    return m.data if isinstance(m, BinaryMask) else np.asarray(m)


def jaccard(pred, gt) -> float:
    """|A & B| / |A | B| over pixels equal to 1; two empty masks score 1.0."""
    a = _mask_array(pred)
    b = _mask_array(gt)
    if a.shape != b.shape:
        raise DataError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    a = a.astype(bool, copy=False)
    b = b.astype(bool, copy=False)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def thresholded_jaccard(j: float, threshold: float = SEG_THRESHOLD) -> float:
    if not (0.0 <= j <= 1.0):
        raise DataError(f"Jaccard value {j!r} outside [0, 1]")
    return float(j) if j >= threshold else 0.0


def mean(values) -> float:
    # fsum keeps the result independent of reduction order
    values = list(values)
    if not values:
        raise DataError("cannot average an empty sequence")
    return math.fsum(values) / len(values)


def dataset_seg_score(pairs, threshold: float = SEG_THRESHOLD) -> float:
    """Mean thresholded Jaccard over (pred, gt) pairs."""
    scores = [thresholded_jaccard(jaccard(p, g), threshold) for p, g in pairs]
    if not scores:
        raise DataError("no (prediction, ground truth) pairs to score")
    return mean(scores)


def attribute_scores(pred: ProbMap, gt: ProbMap, bin_threshold: float = 0.5):
    """Per-attribute Jaccard after binarizing predictions, plus their mean.

    Returns ``(scores, mean)`` where ``scores`` has one entry per channel in
    the attribute order of the inputs.
    """
    if pred.channels != 5 or gt.channels != 5:
        raise DataError(
            f"attribute maps need 5 channels, got pred={pred.channels} gt={gt.channels}"
        )
    if pred.data.shape != gt.data.shape:
        raise DataError(f"attribute map dimensions differ: {pred.data.shape} vs {gt.data.shape}")
    g = gt.data
    if not np.isin(g, (0.0, 1.0)).all():
        raise DataError("ground-truth attribute channels must be binary")
    scores = tuple(
        jaccard(pred.data[:, :, c] >= bin_threshold, g[:, :, c] >= 0.5) for c in range(5)
    )
    return scores, mean(scores)


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean recall over classes that occur in the ground truth."""
    counts = cm.counts
    support = counts.sum(axis=1)
    present = np.flatnonzero(support)
    if present.size == 0:
        raise DataError("confusion matrix is all zero")
    recalls = [counts[i, i] / support[i] for i in present]
    return mean(recalls)


def per_class_recall(cm: ConfusionMatrix) -> dict[str, float | None]:
    support = cm.counts.sum(axis=1)
    return {
        name: (cm.counts[i, i] / support[i] if support[i] else None)
        for i, name in enumerate(CLASSES)
    }


def confusion_from_tables(pred: dict, gt: dict) -> ConfusionMatrix:
    """Accumulate a confusion matrix from {image: probabilities} tables.

    Predicted class is the argmax of the row, ties resolved toward the lower
    canonical index.
    """
    only_pred = sorted(set(pred) - set(gt))
    only_gt = sorted(set(gt) - set(pred))
    if only_pred or only_gt:
        raise DataError(
            f"image ids not shared by both tables: prediction-only {only_pred[:10]}, "
            f"ground-truth-only {only_gt[:10]}"
        )
    if not gt:
        raise DataError("no shared image ids between prediction and ground truth")
    counts = np.zeros((len(CLASSES), len(CLASSES)), np.int64)
    for image in sorted(gt):
        row = gt[image]
        if not all(v in (0.0, 1.0) for v in row) or sum(row) != 1.0:
            raise DataError(f"ground-truth row for {image!r} is not one-hot: {row}")
        true = row.index(1.0)
        p = pred[image]
        if any(math.isnan(v) for v in p):
            raise DataError(f"prediction row for {image!r} contains NaN")
        counts[true, int(np.argmax(p))] += 1
    return ConfusionMatrix(counts)


def confusion_from_csv(pred_csv, gt_csv) -> ConfusionMatrix:
    return confusion_from_tables(read_class_table(pred_csv), read_class_table(gt_csv))
