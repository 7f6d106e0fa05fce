"""Per-class first-order cluster statistics and the contrastive alignment loss.

Class means are L2-normalized to remove the scale gap between domains; the
loss then asks each target cluster direction to sit closer to its own
source cluster than to any other, via a softmax over negative euclidean
distances. Source statistics are constants: only the target side carries
gradient.
"""

import csv
import logging

import numpy as np
from dataclasses import dataclass

from .numerics import NORM_EPS, LossValue, l2_normalize_backward, softmax_rows

log = logging.getLogger(__name__)


class NoAlignableClassesError(ValueError):
    """No class is present in both the target and source statistics."""


@dataclass
class ClusterStats:
    """Per-class feature means, their unit-normalized form, and presence."""

    means: np.ndarray  # (K, c)
    normalized: np.ndarray  # (K, c), unit rows where present
    counts: np.ndarray  # (K,) int
    present: np.ndarray  # (K,) bool
    degenerate: np.ndarray  # (K,) bool, near-zero mean treated as absent

    @property
    def num_classes(self):
        return self.means.shape[0]


def cluster_stats(f, y, num_classes):
    """Arithmetic mean of each class's features plus its unit direction.

    IGNORE pixels contribute nothing. A class whose mean has near-zero norm
    is flagged degenerate and treated as absent.
    """
    f = np.asarray(f, dtype=float)
    y = np.asarray(y)
    if f.shape[:-1] != y.shape:
        raise ValueError("feature map and label map shapes differ")
    flat_f = f.reshape(-1, f.shape[-1])
    flat_y = y.reshape(-1)
    c = flat_f.shape[1]
    means = np.zeros((num_classes, c))
    normalized = np.zeros((num_classes, c))
    counts = np.zeros(num_classes, dtype=np.int64)
    present = np.zeros(num_classes, dtype=bool)
    degenerate = np.zeros(num_classes, dtype=bool)
    for k in range(num_classes):
        members = flat_y == k
        m = int(np.count_nonzero(members))
        if m == 0:
            continue
        counts[k] = m
        u = flat_f[members].mean(axis=0)
        norm = float(np.sqrt(np.sum(u * u)))
        if norm <= NORM_EPS:
            degenerate[k] = True
            log.warning("class %d mean is degenerate (norm %.3e); treated as absent", k, norm)
            continue
        means[k] = u
        normalized[k] = u / norm
        present[k] = True
    return ClusterStats(
        means=means, normalized=normalized, counts=counts, present=present, degenerate=degenerate
    )


def alignment_loss(target, source):
    """Contrastive loss over mutually present classes.

    For each shared class k the positive is the distance between the unit
    mean directions of target-k and source-k; all source classes in the
    shared set serve as the softmax denominator. The 1/K prefactor uses the
    shared-class count. Gradient is returned with respect to the target
    means (chain through the L2 normalization included); the source side is
    constant.
    """
    if target.num_classes != source.num_classes:
        raise ValueError("class count mismatch")
    shared = np.flatnonzero(target.present & source.present)
    if shared.size == 0:
        raise NoAlignableClassesError("no alignable classes")
    kk = shared.size
    u_t = target.normalized[shared]
    u_s = source.normalized[shared]

    diff = u_t[:, None, :] - u_s[None, :, :]  # (kk, kk, c)
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    q = softmax_rows(-dist)
    rows = np.arange(kk)
    value = float(np.mean(-np.log(q[rows, rows])))

    d_e = q / kk
    d_e[rows, rows] -= 1.0 / kk
    # dE_ab/dU_t[a] = -(U_t[a]-U_s[b])/D_ab; zero subgradient at D == 0.
    inv = np.where(dist > NORM_EPS, 1.0 / np.maximum(dist, NORM_EPS), 0.0)
    d_unit = -np.sum((d_e * inv)[:, :, None] * diff, axis=1)

    grad_means = np.zeros_like(target.means)
    for a, k in enumerate(shared):
        grad_means[k] = l2_normalize_backward(target.means[k], d_unit[a])
    return LossValue(
        value=value,
        gradients={"target_means": grad_means},
        diagnostics={"classes": shared, "pair_distances": dist},
    )


def scatter_mean_gradient(grad_means, y, counts, feature_shape):
    """Spread per-class mean gradients back onto pixel features.

    Each pixel of class k receives grad_means[k] / counts[k]; IGNORE and
    unrepresented classes receive zero. feature_shape is the full feature
    map shape (..., c).
    """
    y = np.asarray(y)
    grad = np.zeros(feature_shape, dtype=float)
    flat_g = grad.reshape(-1, feature_shape[-1])
    flat_y = y.reshape(-1)
    for k in range(grad_means.shape[0]):
        if counts[k] <= 0 or not np.any(grad_means[k]):
            continue
        flat_g[flat_y == k] = grad_means[k] / counts[k]
    return grad


class ClusterStatsEma:
    """Exponential moving average over detached per-batch statistics.

    Only meaningful for the constant (source) side of the alignment loss;
    blending would invalidate the analytic gradient on the target side.
    Off by default in the trainer.
    """

    def __init__(self, decay=0.99):
        self.decay = decay
        self._stats = None

    def update(self, stats):
        if self._stats is None:
            self._stats = stats
            return stats
        prev = self._stats
        means = np.array(prev.means)
        counts = np.array(prev.counts)
        present = np.array(prev.present)
        for k in range(stats.num_classes):
            if not stats.present[k]:
                continue
            if present[k]:
                means[k] = self.decay * means[k] + (1.0 - self.decay) * stats.means[k]
            else:
                means[k] = stats.means[k]
            present[k] = True
            counts[k] = stats.counts[k]
        normalized = np.zeros_like(means)
        degenerate = np.zeros(stats.num_classes, dtype=bool)
        for k in np.flatnonzero(present):
            norm = float(np.sqrt(np.sum(means[k] ** 2)))
            if norm <= NORM_EPS:
                present[k] = False
                degenerate[k] = True
                continue
            normalized[k] = means[k] / norm
        self._stats = ClusterStats(
            means=means, normalized=normalized, counts=counts, present=present, degenerate=degenerate
        )
        return self._stats


def export_cluster_stats_csv(path, stats):
    """One row per present class: k, count, mean..., unit mean..."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        c = stats.means.shape[1]
        writer.writerow(["class", "count"] + [f"u{d}" for d in range(c)] + [f"U{d}" for d in range(c)])
        for k in np.flatnonzero(stats.present):
            writer.writerow(
                [int(k), int(stats.counts[k])]
                + [repr(v) for v in stats.means[k]]
                + [repr(v) for v in stats.normalized[k]]
            )
