"""Desk-scale segmenter and the split training objective.

The segmenter is a per-pixel two-layer tanh transform (the feature
extractor) followed by a linear per-pixel classifier. The objective routes
gradients asymmetrically: the extractor minimizes the supervised loss plus
all three adaptation terms, while the classifier minimizes only the
supervised loss and the normalized-cut term. Pseudo-labels, prototypes and
source statistics are constants within one step; the normalized-cut term
reaches the extractor both through the affinity graph and through the
score map.
"""

import hashlib
import json

import numpy as np
from dataclasses import dataclass, field, asdict

from . import tensor_io
from .numerics import LOG_FLOOR, LossValue, softmax_rows, softmax_backward
from .clustering import IGNORE, build_prototypes, clustering_loss, pseudo_labels
from .alignment import (
    NoAlignableClassesError,
    alignment_loss,
    cluster_stats,
    scatter_mean_gradient,
)
from .graphcut import affinity_matrix, ncut_loss

EXTRACTOR_PARAMS = ("w1", "b1", "w2", "b2")
CLASSIFIER_PARAMS = ("wc", "bc")
WEIGHT_PARAMS = ("w1", "w2", "wc")  # weight decay applies here, not to biases


@dataclass
class ObjectiveConfig:
    lambda_c: float = 0.0015
    lambda_a: float = 0.001
    lambda_n: float = 0.002
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 2000
    adapt_iters: int = 2000
    max_iters: int = 4000
    poly_power: float = 0.9
    affinity_stride: int = 1
    seed: int = 0
    batch_size: int = 4
    hidden_dim: int = 16
    feature_dim: int = 8
    proto_subsample: int = 512
    selftrain_iters: int = 500
    selftrain_lr_scale: float = 0.25
    source_stats_ema: float = 0.0  # decay; 0 disables the moving average
    # Feature-layer init: a shared bias plus a small weight scale start all
    # pixel features in a common cone, so the angular (cosine) structure the
    # adaptation losses measure is built during training rather than
    # inherited from the init. Linear separability is unaffected (the
    # classifier absorbs a common offset into its bias).
    feature_bias_init: float = 2.75
    feature_init_scale: float = 1.0

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_a, self.lambda_n) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.max_iters < self.warmup_iters + self.adapt_iters:
            raise ValueError("max_iters must cover warmup + adaptation")

    def config_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Segmenter:
    """Parameter container; w1/b1/w2/b2 form the extractor, wc/bc the classifier."""

    params: dict

    @property
    def input_channels(self):
        return self.params["w1"].shape[1]

    @property
    def feature_dim(self):
        return self.params["w2"].shape[0]

    @property
    def num_classes(self):
        return self.params["wc"].shape[0]

    def copy(self):
        return Segmenter({k: np.array(v) for k, v in self.params.items()})


def init_segmenter(input_channels, num_classes, cfg):
    rng = np.random.default_rng(cfg.seed)
    h, c = cfg.hidden_dim, cfg.feature_dim
    params = {
        "w1": rng.normal(0.0, 1.0 / np.sqrt(input_channels), size=(h, input_channels)),
        "b1": np.zeros(h),
        "w2": rng.normal(0.0, cfg.feature_init_scale / np.sqrt(h), size=(c, h)),
        "b2": np.full(c, float(cfg.feature_bias_init)),
        "wc": rng.normal(0.0, 1.0 / np.sqrt(c), size=(num_classes, c)),
        "bc": np.zeros(num_classes),
    }
    return Segmenter(params)


def extractor_forward(seg, x):
    """Per-pixel features; returns (features, cache for backward)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != seg.input_channels:
        raise ValueError("input channel mismatch")
    x2d = x.reshape(-1, x.shape[-1])
    p = seg.params
    h1 = np.tanh(x2d @ p["w1"].T + p["b1"])
    f2d = h1 @ p["w2"].T + p["b2"]
    f = f2d.reshape(x.shape[:-1] + (seg.feature_dim,))
    return f, {"x2d": x2d, "h1": h1}


def extractor_backward(seg, cache, df):
    """Backprop pixel feature gradients to the extractor parameters."""
    p = seg.params
    df2d = df.reshape(-1, seg.feature_dim)
    h1 = cache["h1"]
    dw2 = df2d.T @ h1
    db2 = df2d.sum(axis=0)
    da1 = (df2d @ p["w2"]) * (1.0 - h1 * h1)
    dw1 = da1.T @ cache["x2d"]
    db1 = da1.sum(axis=0)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def classifier_forward(seg, f):
    """Per-pixel logits and softmax scores from features."""
    f = np.asarray(f, dtype=float)
    f2d = f.reshape(-1, seg.feature_dim)
    logits2d = f2d @ seg.params["wc"].T + seg.params["bc"]
    shape = f.shape[:-1] + (seg.num_classes,)
    p = softmax_rows(logits2d)
    return logits2d.reshape(shape), p.reshape(shape)


def classifier_backward(seg, f, dlogits):
    """Backprop logit gradients to (classifier params, feature gradient)."""
    f2d = np.asarray(f, dtype=float).reshape(-1, seg.feature_dim)
    dl2d = dlogits.reshape(-1, seg.num_classes)
    dwc = dl2d.T @ f2d
    dbc = dl2d.sum(axis=0)
    df = (dl2d @ seg.params["wc"]).reshape(np.asarray(f).shape)
    return {"wc": dwc, "bc": dbc}, df


def forward(seg, x):
    """Full pass: input map -> (feature map, score map)."""
    f, _ = extractor_forward(seg, x)
    _, p = classifier_forward(seg, f)
    return f, p


def predict(seg, x):
    _, p = forward(seg, x)
    return pseudo_labels(p)


def segmentation_loss(p, y):
    """Pixel-wise cross entropy over non-IGNORE pixels.

    Gradient is reported with respect to the logits behind p, the standard
    fused softmax + cross-entropy form (p - onehot)/count.
    """
    p = np.asarray(p, dtype=float)
    y = np.asarray(y)
    if p.shape[:-1] != y.shape:
        raise ValueError("score map and label map shapes differ")
    k = p.shape[-1]
    p2d = p.reshape(-1, k)
    y1d = y.reshape(-1)
    scored = y1d != IGNORE
    n = int(np.count_nonzero(scored))
    if n == 0:
        raise ValueError("empty supervision")
    rows = np.flatnonzero(scored)
    picked = np.maximum(p2d[rows, y1d[rows]], LOG_FLOOR)
    value = float(np.mean(-np.log(picked)))
    grad = np.zeros_like(p2d)
    grad[rows] = p2d[rows] / n
    grad[rows, y1d[rows]] -= 1.0 / n
    return LossValue(
        value=value,
        gradients={"logits": grad.reshape(p.shape)},
        diagnostics={"scored": n},
    )


@dataclass
class AdaptContext:
    """Per-step constants of the adaptation objective.

    Pseudo-labels, prototypes and source statistics are frozen here so the
    analytic parameter gradients and any finite-difference probe see the
    same function.
    """

    pseudo: np.ndarray
    prototypes: object = None
    source_stats: object = None


@dataclass
class ObjectiveResult:
    terms: dict
    grads: dict
    skipped: dict = field(default_factory=dict)
    ctx: AdaptContext = None


def build_context(seg, f_s, y_s, p_t, f_t, cfg):
    pseudo = pseudo_labels(p_t)
    prototypes = None
    if cfg.lambda_c > 0:
        prototypes = build_prototypes(
            f_t, pseudo, seg.num_classes, subsample=cfg.proto_subsample
        )
    source_stats = None
    if cfg.lambda_a > 0:
        source_stats = cluster_stats(f_s, y_s, seg.num_classes)
    return AdaptContext(pseudo=pseudo, prototypes=prototypes, source_stats=source_stats)


def total_objective(seg, x_s, y_s, x_t, cfg, ctx=None, target_labels=None):
    """One step of the split objective with routed parameter gradients.

    Extractor parameters receive the gradient of
    L_seg + lambda_c L_c + lambda_a L_a + lambda_n L_n; classifier
    parameters receive the gradient of L_seg + lambda_n L_n only (the
    clustering and alignment paths into the classifier pass through the
    pseudo-label argmax and carry no gradient). Degenerate terms are
    skipped with a reason instead of aborting. `target_labels`, when
    given, adds a supervised cross-entropy on the target batch (used by
    self-training) that reaches both parameter groups.
    """
    x_s = np.asarray(x_s, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    f_s, cache_s = extractor_forward(seg, x_s)
    _, p_s = classifier_forward(seg, f_s)
    f_t, cache_t = extractor_forward(seg, x_t)
    _, p_t = classifier_forward(seg, f_t)

    if ctx is None:
        ctx = build_context(seg, f_s, y_s, p_t, f_t, cfg)

    terms = {}
    skipped = {}
    seg_loss = segmentation_loss(p_s, y_s)
    terms["L_seg"] = seg_loss.value
    dlogits_s = seg_loss.gradients["logits"]
    df_t = np.zeros_like(f_t)
    dp_t = np.zeros_like(p_t)

    terms["L_c"] = 0.0
    if cfg.lambda_c > 0:
        if ctx.prototypes is not None and ctx.prototypes.present_classes().size > 0:
            lc = clustering_loss(f_t, ctx.pseudo, ctx.prototypes)
            terms["L_c"] = lc.value
            df_t += cfg.lambda_c * lc.gradients["features"]
        else:
            skipped["L_c"] = "no prototypes"

    terms["L_a"] = 0.0
    if cfg.lambda_a > 0:
        t_stats = cluster_stats(f_t, ctx.pseudo, seg.num_classes)
        try:
            la = alignment_loss(t_stats, ctx.source_stats)
            terms["L_a"] = la.value
            df_t += cfg.lambda_a * scatter_mean_gradient(
                la.gradients["target_means"], ctx.pseudo, t_stats.counts, f_t.shape
            )
        except NoAlignableClassesError:
            skipped["L_a"] = "no alignable classes"

    terms["L_n"] = 0.0
    if cfg.lambda_n > 0:
        batch = f_t.shape[0] if f_t.ndim == 4 else 1
        f_imgs = f_t if f_t.ndim == 4 else f_t[None]
        p_imgs = p_t if f_t.ndim == 4 else p_t[None]
        df_imgs = df_t if f_t.ndim == 4 else df_t[None]
        dp_imgs = dp_t if f_t.ndim == 4 else dp_t[None]
        ln_total = 0.0
        for b in range(batch):
            graph = affinity_matrix(f_imgs[b], stride=cfg.affinity_stride)
            rr, cc = graph.pixel_index[:, 0], graph.pixel_index[:, 1]
            ln = ncut_loss(p_imgs[b][rr, cc], graph)
            ln_total += ln.value
            scale = cfg.lambda_n / batch
            dp_imgs[b][rr, cc] += scale * ln.gradients["scores"]
            df_imgs[b][rr, cc] += scale * ln.gradients["features"]
        terms["L_n"] = ln_total / batch

    dlogits_t = softmax_backward(p_t, dp_t)
    if target_labels is not None:
        st_loss = segmentation_loss(p_t, target_labels)
        terms["L_seg_t"] = st_loss.value
        dlogits_t = dlogits_t + st_loss.gradients["logits"]

    cls_grads_s, df_s = classifier_backward(seg, f_s, dlogits_s)
    cls_grads_t, df_from_p = classifier_backward(seg, f_t, dlogits_t)
    df_t += df_from_p

    ext_grads_s = extractor_backward(seg, cache_s, df_s)
    ext_grads_t = extractor_backward(seg, cache_t, df_t)
    grads = {name: ext_grads_s[name] + ext_grads_t[name] for name in EXTRACTOR_PARAMS}
    for name in CLASSIFIER_PARAMS:
        grads[name] = cls_grads_s[name] + cls_grads_t[name]

    terms["total"] = (
        terms["L_seg"]
        + cfg.lambda_c * terms["L_c"]
        + cfg.lambda_a * terms["L_a"]
        + cfg.lambda_n * terms["L_n"]
        + terms.get("L_seg_t", 0.0)
    )
    return ObjectiveResult(terms=terms, grads=grads, skipped=skipped, ctx=ctx)


def supervised_objective(seg, x, y):
    """Warm-up objective: supervised cross entropy only, both groups."""
    f, cache = extractor_forward(seg, x)
    _, p = classifier_forward(seg, f)
    loss = segmentation_loss(p, y)
    cls_grads, df = classifier_backward(seg, f, loss.gradients["logits"])
    grads = extractor_backward(seg, cache, df)
    grads.update(cls_grads)
    return ObjectiveResult(terms={"L_seg": loss.value, "total": loss.value}, grads=grads)


def poly_lr(iteration, cfg, base_lr=None, horizon=None):
    """base_lr * (1 - iter/horizon)^power; strictly decreasing, zero at the horizon."""
    base = cfg.base_lr if base_lr is None else base_lr
    high = cfg.max_iters if horizon is None else horizon
    frac = 1.0 - iteration / high
    return base * frac**cfg.poly_power


class SgdState:
    """Momentum buffers, one per parameter."""

    def __init__(self, seg):
        self.buffers = {k: np.zeros_like(v) for k, v in seg.params.items()}


def sgd_step(seg, grads, state, iteration, cfg, base_lr=None, horizon=None):
    """Momentum SGD with poly learning rate and decoupled weight decay.

    Weight decay touches weight matrices only, never biases.
    """
    high = cfg.max_iters if horizon is None else horizon
    if iteration >= high:
        raise ValueError("iteration beyond schedule horizon")
    lr = poly_lr(iteration, cfg, base_lr=base_lr, horizon=horizon)
    for name, param in seg.params.items():
        buf = state.buffers[name]
        buf *= cfg.momentum
        buf += grads[name]
        param -= lr * buf
        if name in WEIGHT_PARAMS and cfg.weight_decay > 0:
            param -= lr * cfg.weight_decay * param
    return lr


def save_checkpoint(path, seg, iteration, cfg):
    """Binary tensors per parameter plus a manifest with shapes and config hash."""
    import os

    os.makedirs(path, exist_ok=True)
    manifest = {
        "iteration": int(iteration),
        "config_hash": cfg.config_hash(),
        "config": asdict(cfg),
        "params": {},
    }
    for name, value in seg.params.items():
        fname = f"{name}.catn"
        tensor_io.save_tensor(os.path.join(path, fname), value)
        manifest["params"][name] = {"file": fname, "shape": list(value.shape)}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    import os

    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    params = {}
    for name, entry in manifest["params"].items():
        arr = tensor_io.load_tensor(os.path.join(path, entry["file"]))
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        params[name] = arr
    return Segmenter(params), manifest["iteration"], manifest
