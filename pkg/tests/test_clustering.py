import math

import numpy as np
import pytest

from clusteralign.clustering import (
    IGNORE,
    build_prototypes,
    clustering_loss,
    prototype_probability,
    pseudo_labels,
    select_class_features,
    select_prototype,
)
from clusteralign.numerics import cosine_similarity, finite_difference_check


def one_hot_scores(labels, k):
    p = np.zeros(labels.shape + (k,))
    for idx in np.ndindex(labels.shape):
        p[idx][labels[idx]] = 1.0
    return p


def test_pseudo_labels_one_hot():
    labels = np.array([[0, 2], [1, 1]])
    assert np.array_equal(pseudo_labels(one_hot_scores(labels, 3)), labels)


def test_pseudo_labels_tie_breaks_low():
    p = np.full((2, 2, 3), 1.0 / 3.0)
    assert np.all(pseudo_labels(p) == 0)


def test_pseudo_labels_matches_max_scan():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(4), size=(5, 6))
    got = pseudo_labels(p)
    for r in range(5):
        for c in range(6):
            best, best_k = -1.0, None
            for k in range(4):
                if p[r, c, k] > best:
                    best, best_k = p[r, c, k], k
            assert got[r, c] == best_k


def test_select_class_features_all_and_none():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(3, 4, 2))
    y = np.full((3, 4), 2)
    out = select_class_features(f, y, 2)
    assert np.array_equal(out, f.reshape(-1, 2))
    assert select_class_features(f, y, 0).shape[0] == 0


def test_select_class_features_checkerboard():
    f = np.arange(8, dtype=float).reshape(2, 2, 2)
    y = np.array([[0, 1], [1, 0]])
    out = select_class_features(f, y, 0)
    # Row-major pixels (0,0) and (1,1).
    assert np.array_equal(out, np.stack([f[0, 0], f[1, 1]]))


def test_select_prototype_identical_tie_breaks_first():
    feats = np.tile([1.0, 2.0], (5, 1))
    proto, alpha = select_prototype(feats)
    assert alpha == 0
    assert np.array_equal(proto, feats[0])


def test_select_prototype_picks_central_member():
    mid = np.array([1.0, 0.1]) / np.linalg.norm([1.0, 0.1])
    feats = np.stack([[1.0, 0.0], mid, [0.0, 1.0]])
    proto, alpha = select_prototype(feats)
    assert alpha == 1
    assert np.array_equal(proto, feats[1])


def test_select_prototype_scale_invariant():
    rng = np.random.default_rng(2)
    for _ in range(20):
        feats = rng.normal(size=(8, 3))
        _, a1 = select_prototype(feats)
        _, a2 = select_prototype(2.0 * feats)
        assert a1 == a2


def test_select_prototype_matches_exhaustive():
    rng = np.random.default_rng(3)
    for _ in range(50):
        m = int(rng.integers(1, 30))
        feats = rng.normal(size=(m, 4))
        _, alpha = select_prototype(feats)
        scores = []
        for i in range(m):
            scores.append(sum(cosine_similarity(feats[i], feats[j]) for j in range(m)))
        assert alpha == int(np.argmax(scores))


def test_select_prototype_errors():
    with pytest.raises(ValueError, match="absent class"):
        select_prototype(np.zeros((0, 3)))
    with pytest.raises(ValueError, match="degenerate feature"):
        select_prototype(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_select_prototype_subsample_returns_member():
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(40, 3))
    proto, alpha = select_prototype(feats, subsample=8)
    assert np.array_equal(proto, feats[alpha])


def test_build_prototypes_bit_identity():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(4, 4, 3))
    y = rng.integers(0, 3, size=(4, 4))
    protos = build_prototypes(f, y, 3)
    flat = f.reshape(-1, 3)
    for k in range(3):
        if protos.present[k]:
            assert np.array_equal(protos.prototypes[k], flat[protos.source_index[k]])


def test_build_prototypes_absent_class():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(2, 2, 3))
    y = np.zeros((2, 2), dtype=int)
    protos = build_prototypes(f, y, 4)
    assert protos.present[0]
    assert not protos.present[1:].any()


def test_prototype_probability_single_class():
    rng = np.random.default_rng(7)
    protos = build_prototypes(rng.normal(size=(2, 2, 3)), np.full((2, 2), 1), 3)
    probs, classes = prototype_probability(rng.normal(size=3), protos)
    assert np.array_equal(classes, [1])
    assert abs(probs[0] - 1.0) < 1e-12


def test_prototype_probability_uniform_when_equidistant():
    protos = build_prototypes(
        np.array([[[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]], [[0.0, 0.0, 1.0]]]),
        np.array([[0], [1], [2]]),
        3,
    )
    probs, _ = prototype_probability(np.array([1.0, 1.0, 1.0]), protos)
    assert np.allclose(probs, 1.0 / 3.0, atol=1e-9)


def test_prototype_probability_known_value():
    protos = build_prototypes(
        np.array([[[1.0, 0.0]], [[0.0, 1.0]]]), np.array([[0], [1]]), 2
    )
    probs, _ = prototype_probability(np.array([1.0, 0.0]), protos)
    assert abs(probs[0] - 0.7311) < 1e-4
    assert abs(probs[1] - 0.2689) < 1e-4


def test_prototype_probability_no_prototypes():
    protos = build_prototypes(np.ones((1, 1, 2)), np.full((1, 1), IGNORE), 2)
    with pytest.raises(ValueError, match="no prototypes"):
        prototype_probability(np.ones(2), protos)


def test_clustering_loss_single_class_is_zero():
    rng = np.random.default_rng(8)
    f = rng.normal(size=(3, 3, 4))
    y = np.zeros((3, 3), dtype=int)
    protos = build_prototypes(f, y, 1)
    lv = clustering_loss(f, y, protos)
    assert lv.value == 0.0
    assert np.allclose(lv.gradients["features"], 0.0)


def test_clustering_loss_orthogonal_prototypes_closed_form():
    # Every feature equals its class prototype; the two prototypes are
    # orthogonal, so each pixel sees similarities (1, 0).
    f = np.zeros((2, 2, 2))
    y = np.array([[0, 0], [1, 1]])
    f[0, :, 0] = 1.0
    f[1, :, 1] = 1.0
    protos = build_prototypes(f, y, 2)
    lv = clustering_loss(f, y, protos)
    assert abs(lv.value - (-math.log(math.e / (math.e + 1.0)))) < 1e-4
    assert abs(lv.value - 0.3133) < 1e-4


def test_clustering_loss_nonnegative_and_scale_invariant():
    rng = np.random.default_rng(9)
    for _ in range(20):
        f = rng.normal(size=(4, 4, 6))
        y = rng.integers(0, 3, size=(4, 4))
        protos = build_prototypes(f, y, 3)
        lv = clustering_loss(f, y, protos)
        assert lv.value >= 0.0
        protos2 = build_prototypes(3.7 * f, y, 3)
        lv2 = clustering_loss(3.7 * f, y, protos2)
        assert abs(lv.value - lv2.value) < 1e-9


def test_clustering_loss_ignores_and_skips():
    rng = np.random.default_rng(10)
    f = rng.normal(size=(2, 3, 4))
    y = np.array([[0, IGNORE, 1], [1, 0, 2]])
    # Build prototypes without class 2 so the class-2 pixel is skipped.
    protos = build_prototypes(f, np.where(y == 2, IGNORE, y), 3)
    lv = clustering_loss(f, y, protos)
    assert lv.diagnostics["skipped"] == 1
    assert lv.diagnostics["scored"] == 4
    grad = lv.gradients["features"]
    assert np.allclose(grad[0, 1], 0.0)  # IGNORE pixel gets no gradient
    assert np.allclose(grad[1, 2], 0.0)  # skipped pixel gets no gradient


@pytest.mark.parametrize("seed", range(5))
def test_clustering_loss_gradient_matches_fd(seed):
    rng = np.random.default_rng(100 + seed)
    f = rng.normal(size=(4, 4, 8))
    y = rng.integers(0, 3, size=(4, 4))
    protos = build_prototypes(f, y, 3)

    def loss(inputs):
        return clustering_loss(inputs["features"], y, protos)

    report = finite_difference_check(loss, {"features": f}, probes=80, rng=rng)
    assert report.worst < 1e-4
