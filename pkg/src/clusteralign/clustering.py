"""Target-domain prototype clustering.

Pseudo-labels come from the per-pixel argmax of the score map. For each
class the prototype is the member feature with the largest summed cosine
similarity to all members of that class; the clustering loss pulls every
feature toward the prototype of its pseudo-label via a softmax over
cosine similarities. Prototypes are treated as constants inside the loss:
gradient moves features toward prototypes, never prototypes toward
features.
"""

import numpy as np
from dataclasses import dataclass

from .numerics import (
    LOG_FLOOR,
    NORM_EPS,
    LossValue,
    pairwise_cosine,
    softmax_rows,
)

# Label value for pixels excluded from supervision and statistics.
IGNORE = -1

# Class member lists larger than this are evenly subsampled before the
# O(M^2) prototype score; the prototype is still drawn from the subsample.
PROTO_SUBSAMPLE = 512


@dataclass
class PrototypeSet:
    """One optional prototype feature per class.

    prototypes[k] is bit-identical to the member feature it was selected
    from; source_index[k] is that feature's flat pixel index (-1 if the
    class is absent).
    """

    prototypes: np.ndarray  # (K, c), zero rows where absent
    source_index: np.ndarray  # (K,) int
    present: np.ndarray  # (K,) bool

    @property
    def num_classes(self):
        return self.prototypes.shape[0]

    def present_classes(self):
        return np.flatnonzero(self.present)


def pseudo_labels(p):
    """Per-pixel argmax over the class axis; ties go to the lowest class."""
    p = np.asarray(p, dtype=float)
    return np.argmax(p, axis=-1).astype(np.int64)


def select_class_features(f, y, k):
    """Features of all pixels labeled k, in row-major pixel order."""
    f = np.asarray(f, dtype=float)
    y = np.asarray(y)
    if f.shape[:-1] != y.shape:
        raise ValueError("feature map and label map shapes differ")
    if k < 0:
        raise ValueError("negative class index")
    flat_f = f.reshape(-1, f.shape[-1])
    flat_y = y.reshape(-1)
    return flat_f[flat_y == k]


def select_prototype(features, subsample=PROTO_SUBSAMPLE):
    """Pick the member with the largest summed cosine similarity to all members.

    The sum includes the self term (a constant +1 shift that cannot change
    the argmax). Ties break to the lowest member index. Returns
    (prototype, index) with the index referring to the input list.
    """
    feats = np.asarray(features, dtype=float)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("absent class")
    m = feats.shape[0]
    if np.any(np.sqrt(np.sum(feats * feats, axis=1)) <= NORM_EPS):
        raise ValueError("degenerate feature")
    if subsample is not None and m > subsample:
        keep = (np.arange(subsample, dtype=np.int64) * m) // subsample
        feats = feats[keep]
    else:
        keep = np.arange(m, dtype=np.int64)
    sims = pairwise_cosine(feats, feats)
    scores = np.sum(sims, axis=1)
    local = int(np.argmax(scores))
    alpha = int(keep[local])
    return np.array(features[alpha], dtype=float), alpha


def build_prototypes(f, y, num_classes, subsample=PROTO_SUBSAMPLE):
    """PrototypeSet over all classes from a feature map and its (pseudo-)labels.

    Classes with no labeled pixels are marked absent rather than erroring;
    small crops routinely miss classes.
    """
    f = np.asarray(f, dtype=float)
    y = np.asarray(y)
    flat_f = f.reshape(-1, f.shape[-1])
    flat_y = y.reshape(-1)
    c = flat_f.shape[1]
    prototypes = np.zeros((num_classes, c))
    source_index = np.full(num_classes, -1, dtype=np.int64)
    present = np.zeros(num_classes, dtype=bool)
    for k in range(num_classes):
        members = np.flatnonzero(flat_y == k)
        if members.size == 0:
            continue
        proto, local = select_prototype(flat_f[members], subsample=subsample)
        prototypes[k] = proto
        source_index[k] = int(members[local])
        present[k] = True
    return PrototypeSet(prototypes=prototypes, source_index=source_index, present=present)


def prototype_probability(f_i, prototypes):
    """Softmax over present classes of cosine similarity to each prototype.

    Returns (probabilities, class_ids); probabilities sum to 1 over the
    present classes, in class-id order.
    """
    classes = prototypes.present_classes()
    if classes.size == 0:
        raise ValueError("no prototypes")
    f_i = np.asarray(f_i, dtype=float)
    sims = pairwise_cosine(f_i[None, :], prototypes.prototypes[classes])[0]
    return softmax_rows(sims), classes


def clustering_loss(f, y_hat, prototypes):
    """Mean negative log probability of each pixel's pseudo-label prototype.

    IGNORE pixels and pixels whose pseudo-label class has no prototype are
    excluded from both the sum and the count (the latter tallied in
    diagnostics["skipped"]). Gradient is with respect to the feature map;
    prototypes are constants.
    """
    f = np.asarray(f, dtype=float)
    y_hat = np.asarray(y_hat)
    if f.shape[:-1] != y_hat.shape:
        raise ValueError("feature map and label map shapes differ")
    classes = prototypes.present_classes()
    if classes.size == 0:
        raise ValueError("no prototypes")

    flat_f = f.reshape(-1, f.shape[-1])
    flat_y = y_hat.reshape(-1)
    grad = np.zeros_like(flat_f)

    class_pos = np.full(prototypes.num_classes, -1, dtype=np.int64)
    class_pos[classes] = np.arange(classes.size)
    labeled = flat_y != IGNORE
    safe_y = np.where(labeled, flat_y, 0)
    usable = labeled & (class_pos[safe_y] >= 0)
    skipped = int(np.count_nonzero(labeled & ~usable))
    n = int(np.count_nonzero(usable))
    if n == 0:
        return LossValue(
            value=0.0,
            gradients={"features": grad.reshape(f.shape)},
            diagnostics={"skipped": skipped, "scored": 0},
        )

    feats = flat_f[usable]
    fn = np.sqrt(np.sum(feats * feats, axis=1))
    if np.any(fn <= NORM_EPS):
        raise ValueError("degenerate feature")
    protos = prototypes.prototypes[classes]
    pn = np.sqrt(np.sum(protos * protos, axis=1))
    sims = (feats @ protos.T) / np.outer(fn, pn)
    q = softmax_rows(sims)

    target = class_pos[flat_y[usable]]
    rows = np.arange(n)
    picked = np.maximum(q[rows, target], LOG_FLOOR)
    value = float(np.mean(-np.log(picked)))

    d_s = q / n
    d_s[rows, target] -= 1.0 / n
    # dS/df_i = proto_k/(|f_i||proto_k|) - S_ik f_i/|f_i|^2, summed over k.
    term1 = (d_s @ (protos / pn[:, None])) / fn[:, None]
    term2 = (np.sum(d_s * sims, axis=1) / (fn * fn))[:, None] * feats
    grad[usable] = term1 - term2
    return LossValue(
        value=value,
        gradients={"features": grad.reshape(f.shape)},
        diagnostics={"skipped": skipped, "scored": n},
    )
