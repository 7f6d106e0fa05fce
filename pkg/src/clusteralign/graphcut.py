"""Feature affinity graph and the differentiable normalized-cut loss.

The graph is complete over retained pixels with row-softmax cosine
similarity weights (asymmetric by construction, diagonal kept). The soft
normalized cut sums, per class, the soft cut mass over the soft
association; two independent oracles (an explicit hard-cut computation and
spectral clustering of the symmetrized graph) back it in tests.
"""

import csv

import numpy as np
from dataclasses import dataclass

from .numerics import NORM_EPS, LossValue, pairwise_cosine, softmax_rows

# Class soft-mass floor: classes whose degree-weighted mass falls below
# this are skipped (their cut numerator is equally negligible).
MASS_EPS = 1e-12


class EigensolverError(RuntimeError):
    pass


@dataclass
class AffinityGraph:
    matrix: np.ndarray  # (n, n) row-stochastic, strictly positive
    degree: np.ndarray  # (n,) row sums of matrix
    pixel_index: np.ndarray  # (n, 2) source (row, col) per node
    features: np.ndarray  # (n, c) retained pixel features
    similarities: np.ndarray  # (n, n) cosine similarities behind matrix
    grid: tuple  # (h, w) of the source feature map

    @property
    def num_nodes(self):
        return self.matrix.shape[0]


def affinity_matrix(f, stride=1):
    """Row-softmax of pairwise cosine similarities over strided pixels.

    Stride s keeps every s-th pixel along each axis, so n = ceil(h/s) *
    ceil(w/s). The diagonal self-similarity term stays in the softmax.
    """
    f = np.asarray(f, dtype=float)
    if f.ndim != 3:
        raise ValueError("expected a h x w x c feature map")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w, _ = f.shape
    rows = np.arange(0, h, stride)
    cols = np.arange(0, w, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    pixel_index = np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1)
    feats = f[rr.reshape(-1), cc.reshape(-1)]
    norms = np.sqrt(np.sum(feats * feats, axis=1))
    if np.any(norms <= NORM_EPS):
        raise ValueError("degenerate feature")
    sims = pairwise_cosine(feats, feats)
    matrix = softmax_rows(sims)
    return AffinityGraph(
        matrix=matrix,
        degree=np.sum(matrix, axis=1),
        pixel_index=pixel_index,
        features=feats,
        similarities=sims,
        grid=(h, w),
    )


def ncut_loss(p, graph):
    """Soft K-way normalized cut of the node score rows.

    value = sum_k [p_k^T A (1 - p_k)] / (d . p_k) over classes whose soft
    mass d . p_k exceeds MASS_EPS. Gradients are returned for the node
    scores and, through both the cut and association terms of A, for the
    node features.
    """
    p = np.asarray(p, dtype=float)
    a = graph.matrix
    n = graph.num_nodes
    if p.ndim != 2 or p.shape[0] != n:
        raise ValueError("score rows do not match graph nodes")
    k = p.shape[1]
    d = graph.degree

    mass = p.T @ d  # (k,)
    keep = mass > MASS_EPS
    skipped = np.flatnonzero(~keep).tolist()
    apc = a @ p  # (n, k)
    cut = mass - np.sum(p * apc, axis=0)  # p^T A (1 - p) per class
    inv_mass = np.where(keep, 1.0 / np.maximum(mass, MASS_EPS), 0.0)
    ratio = cut * inv_mass * inv_mass  # zero on skipped classes
    value = float(np.sum(cut[keep] * inv_mass[keep]))

    atp = a.T @ p
    grad_p = (d[:, None] - apc - atp) * inv_mass[None, :] - np.outer(d, ratio)
    # dL/dA_ij = sum_c [ p_ic (1 - p_jc) / mass_c - ratio_c p_ic ].
    grad_a = (p * inv_mass[None, :]) @ (1.0 - p).T - (p @ ratio)[:, None]

    grad_feats = _chain_affinity_to_features(grad_a, graph)
    return LossValue(
        value=float(value),
        gradients={"scores": grad_p, "features": grad_feats},
        diagnostics={"skipped_classes": skipped},
    )


def _chain_affinity_to_features(grad_a, graph):
    """Backprop dL/dA through the row softmax and the cosine similarities."""
    a = graph.matrix
    sims = graph.similarities
    feats = graph.features
    # Row softmax jacobian: dS_ij = A_ij (dA_ij - sum_j' dA_ij' A_ij').
    inner = np.sum(grad_a * a, axis=1, keepdims=True)
    d_s = a * (grad_a - inner)

    norms = np.sqrt(np.sum(feats * feats, axis=1))
    unit = feats / norms[:, None]
    inv_sq = 1.0 / (norms * norms)
    # S_ij enters through both arguments; diagonal terms cancel exactly.
    first = (d_s @ unit) / norms[:, None] - (np.sum(d_s * sims, axis=1) * inv_sq)[:, None] * feats
    second = (d_s.T @ unit) / norms[:, None] - (np.sum(d_s * sims, axis=0) * inv_sq)[:, None] * feats
    return first + second


def hard_ncut_value(labels, graph):
    """Classic K-way normalized cut of a hard assignment.

    Explicit edge sums, independent of the soft-loss code path; empty
    classes are skipped.
    """
    labels = np.asarray(labels)
    a = graph.matrix
    n = graph.num_nodes
    if labels.shape != (n,):
        raise ValueError("labels do not match graph nodes")
    total = 0.0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size == 0:
            continue
        cut = 0.0
        assoc = 0.0
        inside = np.zeros(n, dtype=bool)
        inside[members] = True
        for i in members:
            assoc += float(graph.degree[i])
            for j in range(n):
                if not inside[j]:
                    cut += float(a[i, j])
        total += cut / assoc
    return total


def spectral_cluster(graph, num_clusters, seed=0):
    """K-way labels from the symmetrized normalized Laplacian eigenvectors.

    Works on (A + A^T)/2, embeds nodes with the eigenvectors of the K
    smallest eigenvalues (rows renormalized), then refines with seeded
    Lloyd iterations. Deterministic for a fixed seed.
    """
    n = graph.num_nodes
    if num_clusters < 1 or num_clusters > n:
        raise ValueError("cluster count out of range")
    w = 0.5 * (graph.matrix + graph.matrix.T)
    deg = np.sum(w, axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(n) - inv_sqrt[:, None] * w * inv_sqrt[None, :]
    try:
        _, vecs = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(f"eigensolver did not converge: {exc}") from exc
    emb = vecs[:, :num_clusters]
    norms = np.sqrt(np.sum(emb * emb, axis=1))
    emb = emb / np.where(norms > NORM_EPS, norms, 1.0)[:, None]
    return _lloyd(emb, num_clusters, seed)


def _lloyd(points, k, seed, max_iter=100):
    n = points.shape[0]
    rng = np.random.default_rng(seed)
    centers = [int(rng.integers(n))]
    dist = np.sum((points - points[centers[0]]) ** 2, axis=1)
    while len(centers) < k:
        nxt = int(np.argmax(dist))
        centers.append(nxt)
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    centers = points[centers].copy()

    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(d2, axis=1)
        for c in range(k):
            members = new_assign == c
            if np.any(members):
                centers[c] = points[members].mean(axis=0)
            else:
                # Revive an empty cluster at the point worst served by its center.
                worst = int(np.argmax(d2[np.arange(n), new_assign]))
                centers[c] = points[worst]
                new_assign[worst] = c
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign


def affinity_probe_map(f, row, col):
    """Cosine similarity of one probe pixel to every pixel, as an h x w grid."""
    f = np.asarray(f, dtype=float)
    h, w, c = f.shape
    flat = f.reshape(-1, c)
    sims = pairwise_cosine(flat[row * w + col][None, :], flat)[0]
    return sims.reshape(h, w)


def export_edge_list_csv(path, graph):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j", "weight"])
        n = graph.num_nodes
        for i in range(n):
            for j in range(n):
                writer.writerow([i, j, repr(float(graph.matrix[i, j]))])
