"""Differentiable numeric primitives shared by every loss.

All computation is float64. Each primitive comes with a hand-derived
gradient helper; losses built from them return a LossValue carrying the
scalar and the analytic gradient per input tensor, which
finite_difference_check probes against central differences.
"""

import numpy as np
from dataclasses import dataclass, field

# Norms below this are treated as degenerate (zero vector).
NORM_EPS = 1e-12
# Probabilities are clamped here before log to avoid -inf on saturated softmax.
LOG_FLOOR = 1e-12
# Denominator floor for relative gradient errors; keeps round-off noise at
# near-zero coordinates from registering as mismatch.
REL_ERR_FLOOR = 1e-3


@dataclass
class LossValue:
    """Scalar loss plus analytic gradients keyed by input-tensor name."""

    value: float
    gradients: dict
    diagnostics: dict = field(default_factory=dict)


def softmax(v):
    """Stabilized softmax of a 1-D vector: positive, sums to 1."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("empty input")
    z = np.exp(v - np.max(v))
    return z / np.sum(z)


def softmax_rows(x):
    """Stabilized softmax along the last axis of an array."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] == 0:
        raise ValueError("empty input")
    z = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


def softmax_backward(p, dp):
    """Backprop through softmax: upstream dL/dp -> dL/dlogits.

    p and dp share shape; softmax was taken along the last axis.
    """
    inner = np.sum(dp * p, axis=-1, keepdims=True)
    return p * (dp - inner)


def l2_norm(v):
    return float(np.sqrt(np.sum(np.asarray(v, dtype=float) ** 2)))


def cosine_similarity(a, b):
    """Cosine similarity of two nonzero vectors, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    na, nb = l2_norm(a), l2_norm(b)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise ValueError("degenerate vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_grad_a(a, b):
    """d cos(a, b) / d a for nonzero a, b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = l2_norm(a), l2_norm(b)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise ValueError("degenerate vector")
    s = np.dot(a, b) / (na * nb)
    return b / (na * nb) - s * a / (na * na)


def l2_normalize(v):
    """v / ||v||_2; raises on (near-)zero input."""
    v = np.asarray(v, dtype=float)
    n = l2_norm(v)
    if n <= NORM_EPS:
        raise ValueError("zero-norm statistic")
    return v / n


def l2_normalize_backward(v, g):
    """Backprop through u = v/||v||: upstream dL/du -> dL/dv."""
    v = np.asarray(v, dtype=float)
    n = l2_norm(v)
    if n <= NORM_EPS:
        raise ValueError("zero-norm statistic")
    u = v / n
    return (g - np.dot(g, u) * u) / n


def euclidean_distance(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def euclidean_grad_a(a, b):
    """d ||a-b|| / d a; zero subgradient at a == b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = euclidean_distance(a, b)
    if d <= NORM_EPS:
        return np.zeros_like(a)
    return (a - b) / d


def pairwise_cosine(x, y):
    """Cosine similarity matrix between rows of x (m, c) and rows of y (n, c)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx = np.sqrt(np.sum(x * x, axis=1))
    ny = np.sqrt(np.sum(y * y, axis=1))
    if np.any(nx <= NORM_EPS) or np.any(ny <= NORM_EPS):
        raise ValueError("degenerate vector")
    sims = (x / nx[:, None]) @ (y / ny[:, None]).T
    return np.clip(sims, -1.0, 1.0, out=sims)


def assert_finite(arr, what="tensor"):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
    return arr


@dataclass
class GradCheckReport:
    """Per-input max relative error of analytic vs central-difference gradients."""

    max_rel_error: dict
    eps: float
    probes: int

    @property
    def worst(self):
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    def ok(self, tol=1e-4):
        return self.worst < tol


def finite_difference_check(loss, inputs, eps=1e-5, probes=100, rng=None):
    """Probe analytic gradients of `loss` against central differences.

    loss maps a dict of named arrays to a LossValue whose gradients dict
    contains one entry per input name. `probes` random coordinates are
    perturbed per input. Relative error uses a small denominator floor so
    that round-off at true-zero coordinates does not count as mismatch.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps out of [1e-7, 1e-3]")
    if rng is None:
        rng = np.random.default_rng(0)
    work = {k: np.array(v, dtype=float) for k, v in inputs.items()}
    base = loss(work)
    if not np.isfinite(base.value):
        raise ValueError("unstable probe")
    errors = {}
    for name, arr in work.items():
        if name not in base.gradients:
            raise ValueError(f"loss returned no gradient for input {name!r}")
        analytic = np.asarray(base.gradients[name], dtype=float).reshape(-1)
        flat = arr.reshape(-1)
        if analytic.size != flat.size:
            raise ValueError(f"gradient shape mismatch for input {name!r}")
        worst = 0.0
        for _ in range(probes):
            idx = int(rng.integers(flat.size))
            old = flat[idx]
            flat[idx] = old + eps
            f_plus = loss(work).value
            flat[idx] = old - eps
            f_minus = loss(work).value
            flat[idx] = old
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ValueError("unstable probe")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERR_FLOOR)
            worst = max(worst, err)
        errors[name] = worst
    return GradCheckReport(max_rel_error=errors, eps=eps, probes=probes)
