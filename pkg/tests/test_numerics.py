import math

import numpy as np
import pytest

from clusteralign.numerics import (
    GradCheckReport,
    LossValue,
    cosine_grad_a,
    cosine_similarity,
    euclidean_distance,
    euclidean_grad_a,
    finite_difference_check,
    l2_normalize,
    l2_normalize_backward,
    softmax,
    softmax_backward,
    softmax_rows,
)


def test_softmax_symmetry():
    assert np.allclose(softmax([0.0, 0.0]), [0.5, 0.5])


def test_softmax_known_value():
    # e^1 / (e^1 + e^0)
    out = softmax([1.0, 0.0])
    assert abs(out[0] - 0.7311) < 1e-4
    assert abs(out[1] - 0.2689) < 1e-4


def test_softmax_stabilized_no_overflow():
    out = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out))
    assert out[0] > 0.999999
    assert out[1] < 1e-6


def test_softmax_empty_errors():
    with pytest.raises(ValueError, match="empty input"):
        softmax([])


@pytest.mark.parametrize("seed", range(10))
def test_softmax_simplex_and_positive(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(0, 5, size=rng.integers(1, 12))
    out = softmax(v)
    assert abs(out.sum() - 1.0) < 1e-9
    assert np.all(out > 0)


@pytest.mark.parametrize("seed", range(10))
def test_softmax_argmax_shift_invariant(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(0, 3, size=8)
    shift = rng.normal(0, 50)
    assert np.argmax(softmax(v)) == np.argmax(softmax(v + shift))


def test_cosine_self_similarity():
    v = np.array([0.3, -1.2, 0.5])
    assert abs(cosine_similarity(v, v) - 1.0) < 1e-12


def test_cosine_orthogonal():
    assert abs(cosine_similarity([1.0, 0.0], [0.0, 1.0])) < 1e-12


def test_cosine_scale_invariance():
    assert abs(cosine_similarity([1.0, 1.0], [2.0, 2.0]) - 1.0) < 1e-12
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.normal(size=5)
        b = rng.normal(size=5)
        s, t = rng.uniform(0.1, 10.0, size=2)
        assert abs(cosine_similarity(s * a, t * b) - cosine_similarity(a, b)) < 1e-12


def test_cosine_zero_norm_errors():
    with pytest.raises(ValueError, match="degenerate vector"):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


def test_cosine_matches_elementwise_recomputation():
    rng = np.random.default_rng(11)
    for _ in range(50):
        a = rng.normal(size=6)
        b = rng.normal(size=6)
        num = sum(x * y for x, y in zip(a, b))
        den = math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b))
        assert abs(cosine_similarity(a, b) - num / den) < 1e-12


def test_l2_normalize_345():
    assert np.allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])


def test_l2_normalize_idempotent_on_unit():
    u = l2_normalize(np.random.default_rng(0).normal(size=4))
    assert np.allclose(l2_normalize(u), u)
    assert abs(np.linalg.norm(u) - 1.0) < 1e-9


def test_l2_normalize_zero_errors():
    with pytest.raises(ValueError, match="zero-norm statistic"):
        l2_normalize([0.0, 0.0])


def test_euclidean_identity_and_345():
    a = np.array([1.0, 2.0])
    assert euclidean_distance(a, a) == 0.0
    assert abs(euclidean_distance([0.0, 0.0], [3.0, 4.0]) - 5.0) < 1e-12


def test_euclidean_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = rng.normal(size=7)
        b = rng.normal(size=7)
        expected = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
        assert abs(euclidean_distance(a, b) - expected) < 1e-12
        assert abs(euclidean_distance(b, a) - euclidean_distance(a, b)) < 1e-12


def test_euclidean_triangle_inequality():
    rng = np.random.default_rng(6)
    for _ in range(50):
        a, b, c = rng.normal(size=(3, 5))
        assert euclidean_distance(a, c) <= euclidean_distance(a, b) + euclidean_distance(b, c) + 1e-12


def test_euclidean_length_mismatch():
    with pytest.raises(ValueError):
        euclidean_distance([1.0], [1.0, 2.0])


def test_fd_check_quadratic_nearly_exact():
    rng = np.random.default_rng(7)
    x = rng.normal(size=10)

    def loss(inputs):
        v = inputs["x"]
        return LossValue(value=float(np.sum(v * v)), gradients={"x": 2.0 * v})

    report = finite_difference_check(loss, {"x": x}, eps=1e-5, probes=50, rng=rng)
    assert isinstance(report, GradCheckReport)
    assert report.worst < 1e-6


def test_fd_check_eps_bounds():
    def loss(inputs):
        return LossValue(value=0.0, gradients={"x": np.zeros(3)})

    with pytest.raises(ValueError):
        finite_difference_check(loss, {"x": np.zeros(3)}, eps=1e-2)
    with pytest.raises(ValueError):
        finite_difference_check(loss, {"x": np.zeros(3)}, eps=1e-8)


def test_fd_check_unstable_probe():
    def loss(inputs):
        v = inputs["x"]
        return LossValue(value=float(np.sqrt(v[0])), gradients={"x": np.array([1.0])})

    with pytest.raises(ValueError, match="unstable probe"):
        finite_difference_check(loss, {"x": np.array([1e-7])}, eps=1e-5, probes=5)


def test_softmax_backward_matches_fd():
    rng = np.random.default_rng(8)
    weights = rng.normal(size=6)

    def loss(inputs):
        p = softmax_rows(inputs["v"])
        return LossValue(
            value=float(np.dot(weights, p)),
            gradients={"v": softmax_backward(p, weights)},
        )

    report = finite_difference_check(loss, {"v": rng.normal(size=6)}, probes=30, rng=rng)
    assert report.worst < 1e-6


def test_l2_normalize_backward_matches_fd():
    rng = np.random.default_rng(9)
    weights = rng.normal(size=5)

    def loss(inputs):
        v = inputs["v"]
        return LossValue(
            value=float(np.dot(weights, l2_normalize(v))),
            gradients={"v": l2_normalize_backward(v, weights)},
        )

    report = finite_difference_check(loss, {"v": rng.normal(size=5) + 2.0}, probes=30, rng=rng)
    assert report.worst < 1e-6


def test_cosine_grad_matches_fd():
    rng = np.random.default_rng(10)
    b = rng.normal(size=5)

    def loss(inputs):
        a = inputs["a"]
        return LossValue(value=cosine_similarity(a, b), gradients={"a": cosine_grad_a(a, b)})

    report = finite_difference_check(loss, {"a": rng.normal(size=5)}, probes=30, rng=rng)
    assert report.worst < 1e-6


def test_euclidean_grad_matches_fd():
    rng = np.random.default_rng(12)
    b = rng.normal(size=5)

    def loss(inputs):
        a = inputs["a"]
        return LossValue(value=euclidean_distance(a, b), gradients={"a": euclidean_grad_a(a, b)})

    report = finite_difference_check(loss, {"a": rng.normal(size=5)}, probes=30, rng=rng)
    assert report.worst < 1e-6
