"""Evaluation: confusion matrix, per-class IoU / mIoU, and the
cross-domain cluster-center distance diagnostic.

CCD uses ground-truth labels on both domains; it is an evaluation-only
view of how far each class's mean feature sits between domains, usually
reported normalized by a source-only baseline.
"""

import csv

import numpy as np
from dataclasses import dataclass

from .clustering import IGNORE
from .model import extractor_forward


def confusion_matrix(prediction, truth, num_classes):
    """K x K counts, rows = ground truth, cols = prediction; IGNORE unscored."""
    prediction = np.asarray(prediction).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if prediction.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    scored = truth != IGNORE
    idx = truth[scored] * num_classes + prediction[scored]
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def miou(predictions, truths, num_classes):
    """(per-class IoU, mIoU) accumulated over pairs of label maps.

    Classes absent from both truth and prediction carry NaN IoU and are
    excluded from the mean.
    """
    if len(predictions) != len(truths):
        raise ValueError("prediction/truth count mismatch")
    total = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, true in zip(predictions, truths):
        total += confusion_matrix(pred, true, num_classes)
    tp = np.diag(total).astype(float)
    fp = total.sum(axis=0) - tp
    fn = total.sum(axis=1) - tp
    union = tp + fp + fn
    iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    if np.all(union == 0):
        raise ValueError("no scored pixels")
    return iou, float(np.nanmean(iou))


@dataclass
class CcdReport:
    """Per-class distance between domain mean features; NaN where undefined."""

    per_class: np.ndarray
    normalizer: np.ndarray = None

    @property
    def mean(self):
        if np.all(np.isnan(self.per_class)):
            return float("nan")
        return float(np.nanmean(self.per_class))

    @property
    def normalized(self):
        if self.normalizer is None:
            raise ValueError("no normalizer attached")
        norm = np.where(self.normalizer > 0, self.normalizer, np.nan)
        return self.per_class / norm

    @property
    def normalized_mean(self):
        values = self.normalized
        if np.all(np.isnan(values)):
            return float("nan")
        return float(np.nanmean(values))


def _class_feature_means(seg, samples, num_classes):
    c = seg.feature_dim
    sums = np.zeros((num_classes, c))
    counts = np.zeros(num_classes, dtype=np.int64)
    for sample in samples:
        f, _ = extractor_forward(seg, sample.input)
        flat_f = f.reshape(-1, c)
        flat_y = np.asarray(sample.label).reshape(-1)
        for k in range(num_classes):
            members = flat_y == k
            m = int(np.count_nonzero(members))
            if m:
                sums[k] += flat_f[members].sum(axis=0)
                counts[k] += m
    means = np.full((num_classes, c), np.nan)
    ok = counts > 0
    means[ok] = sums[ok] / counts[ok][:, None]
    return means, counts


def ccd(seg, source_samples, target_samples, num_classes, normalize_means=False):
    """Per-class euclidean distance between source and target mean features.

    Ground-truth labels are used on both sides. Classes missing from either
    side get NaN. With normalize_means the class means are L2-normalized
    before the distance (both variants are exposed; raw is the default).
    """
    mean_s, count_s = _class_feature_means(seg, source_samples, num_classes)
    mean_t, count_t = _class_feature_means(seg, target_samples, num_classes)
    per_class = np.full(num_classes, np.nan)
    for k in range(num_classes):
        if count_s[k] == 0 or count_t[k] == 0:
            continue
        a, b = mean_s[k], mean_t[k]
        if normalize_means:
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            if na <= 0 or nb <= 0:
                continue
            a, b = a / na, b / nb
        per_class[k] = float(np.linalg.norm(a - b))
    return CcdReport(per_class=per_class)


def normalize_ccd(report, baseline):
    """Attach a source-only baseline's raw distances as the normalizer."""
    return CcdReport(per_class=np.array(report.per_class), normalizer=np.array(baseline.per_class))


def write_miou_csv(path, iou, mean_iou, class_names=None):
    """One row per run in a Table-style layout: per-class IoU then mIoU."""
    k = len(iou)
    names = class_names or [f"class{i}" for i in range(k)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + ["mIoU"])
        writer.writerow([f"{v:.6f}" if np.isfinite(v) else "" for v in iou] + [f"{mean_iou:.6f}"])


def write_ccd_csv(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        has_norm = report.normalizer is not None
        header = ["class", "raw"] + (["normalizer", "normalized"] if has_norm else [])
        writer.writerow(header)
        for k, raw in enumerate(report.per_class):
            row = [k, f"{raw:.6f}" if np.isfinite(raw) else ""]
            if has_norm:
                norm = report.normalizer[k]
                row.append(f"{norm:.6f}" if np.isfinite(norm) else "")
                value = report.normalized[k]
                row.append(f"{value:.6f}" if np.isfinite(value) else "")
            writer.writerow(row)
        if has_norm:
            writer.writerow(["mean", f"{report.mean:.6f}", "", f"{report.normalized_mean:.6f}"])
        else:
            writer.writerow(["mean", f"{report.mean:.6f}"])
