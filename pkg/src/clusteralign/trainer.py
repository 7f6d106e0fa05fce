"""Two-phase training loop and the optional self-training stage.

Phase one warms the segmenter up on source supervision alone; phase two
optimizes the split objective with prototypes, cluster statistics and the
affinity graph rebuilt from each batch. The trainer never sees target
labels: target data arrives as bare input maps, and validation labels are
touched only through the metrics module. Everything is deterministic
under the config seed.
"""

import csv
import logging

import numpy as np

from .clustering import IGNORE
from .model import (
    SgdState,
    init_segmenter,
    forward,
    predict,
    sgd_step,
    supervised_objective,
    total_objective,
)
from .metrics import miou

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "iter",
    "phase",
    "epoch",
    "lr",
    "L_seg",
    "L_c",
    "L_a",
    "L_n",
    "total",
    "val_miou",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration, terms):
        super().__init__(f"non-finite loss at iteration {iteration}: {terms}")
        self.iteration = iteration
        self.terms = terms


def _stack_samples(samples):
    xs = np.stack([np.asarray(s.input, dtype=float) for s in samples])
    ys = np.stack([np.asarray(s.label) for s in samples])
    return xs, ys


def _batch_indices(rng, n, batch_size):
    return rng.choice(n, size=min(batch_size, n), replace=n < batch_size)


def _check_finite(result, iteration):
    if not np.isfinite(result.terms["total"]):
        raise TrainingDivergedError(iteration, result.terms)
    for name, grad in result.grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(iteration, {**result.terms, "bad_grad": name})


def _validate(seg, val_samples, num_classes):
    preds = [predict(seg, s.input) for s in val_samples]
    truths = [s.label for s in val_samples]
    return miou(preds, truths, num_classes)[1]


def train(source_samples, target_inputs, cfg, val_samples=None, metrics_path=None):
    """Warm up on source, then adapt with the full objective.

    target_inputs is a list of bare input maps (no labels). Returns the
    trained segmenter and the per-iteration metric rows; validation mIoU is
    refreshed at each epoch boundary and carried forward between.
    """
    if not source_samples or not target_inputs:
        raise ValueError("empty dataset")
    xs, ys = _stack_samples(source_samples)
    xt = np.stack([np.asarray(x, dtype=float) for x in target_inputs])
    num_classes = int(ys.max()) + 1

    seg = init_segmenter(xs.shape[-1], num_classes, cfg)
    state = SgdState(seg)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    val = float("nan")

    warm_epoch_len = max(1, -(-len(source_samples) // cfg.batch_size))
    for it in range(cfg.warmup_iters):
        idx = _batch_indices(rng, len(source_samples), cfg.batch_size)
        result = supervised_objective(seg, xs[idx], ys[idx])
        _check_finite(result, it)
        lr = sgd_step(seg, result.grads, state, it, cfg)
        epoch = it // warm_epoch_len
        if val_samples and (it + 1) % warm_epoch_len == 0:
            val = _validate(seg, val_samples, num_classes)
        rows.append(
            {
                "iter": it,
                "phase": "warmup",
                "epoch": epoch,
                "lr": lr,
                "L_seg": result.terms["L_seg"],
                "L_c": 0.0,
                "L_a": 0.0,
                "L_n": 0.0,
                "total": result.terms["total"],
                "val_miou": val,
            }
        )

    adapt_epoch_len = max(1, -(-len(target_inputs) // cfg.batch_size))
    for j in range(cfg.adapt_iters):
        it = cfg.warmup_iters + j
        idx_s = _batch_indices(rng, len(source_samples), cfg.batch_size)
        idx_t = _batch_indices(rng, len(target_inputs), cfg.batch_size)
        result = total_objective(seg, xs[idx_s], ys[idx_s], xt[idx_t], cfg)
        _check_finite(result, it)
        lr = sgd_step(seg, result.grads, state, it, cfg)
        epoch = j // adapt_epoch_len
        if val_samples and (j + 1) % adapt_epoch_len == 0:
            val = _validate(seg, val_samples, num_classes)
        rows.append(
            {
                "iter": it,
                "phase": "adapt",
                "epoch": epoch,
                "lr": lr,
                "L_seg": result.terms["L_seg"],
                "L_c": result.terms["L_c"],
                "L_a": result.terms["L_a"],
                "L_n": result.terms["L_n"],
                "total": result.terms["total"],
                "val_miou": val,
            }
        )

    if metrics_path:
        write_metrics_csv(metrics_path, rows)
    return seg, rows


def confident_pseudo_labels(seg, target_inputs, confidence):
    """Argmax labels where the max score clears the threshold, IGNORE elsewhere."""
    labels = []
    for x in target_inputs:
        _, p = forward(seg, x)
        hard = np.argmax(p, axis=-1).astype(np.int64)
        keep = np.max(p, axis=-1) >= confidence
        labels.append(np.where(keep, hard, IGNORE))
    return labels


def self_train(seg, source_samples, target_inputs, confidence, rounds, cfg):
    """Rounds of pseudo-label refresh plus joint retraining.

    Each round regenerates confident target pseudo-labels with the current
    model, then optimizes the full objective plus a supervised term on the
    confident pixels. Rounds with under 1% label coverage are skipped with
    a warning. The input segmenter is left untouched.
    """
    if not (0.5 < confidence <= 1.0):
        raise ValueError("confidence must be in (0.5, 1.0]")
    if rounds < 1:
        raise ValueError("need at least one round")
    xs, ys = _stack_samples(source_samples)
    xt = np.stack([np.asarray(x, dtype=float) for x in target_inputs])

    work = seg.copy()
    state = SgdState(work)
    rng = np.random.default_rng(cfg.seed + 1)
    horizon = rounds * cfg.selftrain_iters
    base_lr = cfg.base_lr * cfg.selftrain_lr_scale
    rows = []
    for r in range(rounds):
        pseudo = confident_pseudo_labels(work, target_inputs, confidence)
        coverage = float(np.mean([np.mean(lab != IGNORE) for lab in pseudo]))
        if coverage < 0.01:
            log.warning("self-training round %d aborted: %.2f%% coverage", r, 100 * coverage)
            continue
        yt = np.stack(pseudo)
        for j in range(cfg.selftrain_iters):
            it = r * cfg.selftrain_iters + j
            idx_s = _batch_indices(rng, len(source_samples), cfg.batch_size)
            idx_t = _batch_indices(rng, len(target_inputs), cfg.batch_size)
            result = total_objective(
                work, xs[idx_s], ys[idx_s], xt[idx_t], cfg, target_labels=yt[idx_t]
            )
            _check_finite(result, it)
            lr = sgd_step(work, result.grads, state, it, cfg, base_lr=base_lr, horizon=horizon)
            rows.append(
                {
                    "iter": it,
                    "phase": "selftrain",
                    "epoch": r,
                    "lr": lr,
                    "L_seg": result.terms["L_seg"],
                    "L_c": result.terms["L_c"],
                    "L_a": result.terms["L_a"],
                    "L_n": result.terms["L_n"],
                    "total": result.terms["total"],
                    "val_miou": float("nan"),
                }
            )
    return work, rows


def evaluate(seg, samples, num_classes):
    """(per-class IoU, mIoU) of the segmenter on labeled samples."""
    preds = [predict(seg, s.input) for s in samples]
    truths = [s.label for s in samples]
    return miou(preds, truths, num_classes)


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("lr", "L_seg", "L_c", "L_a", "L_n", "total", "val_miou"):
                out[key] = repr(float(row[key]))
            writer.writerow(out)


def read_metrics_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {
                "iter": int(row["iter"]),
                "phase": row["phase"],
                "epoch": int(row["epoch"]),
            }
            for key in ("lr", "L_seg", "L_c", "L_a", "L_n", "total", "val_miou"):
                parsed[key] = float(row[key])
            rows.append(parsed)
    return rows
