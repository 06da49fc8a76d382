"""Per-class k-means for the magnet loss and PCA for embedding plots."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cdml.errors import ContractError
from cdml.losses import VARIANCE_FLOOR, variance_estimate


def _sq_dists(points, centroids):
    diff = points[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=-1)


def inertia(points, centroids, assignments) -> float:
    """Within-cluster sum of squares."""
    points = np.asarray(points, dtype=float)
    return float(((points - centroids[assignments]) ** 2).sum())


def kmeans_pp_init(points, K, rng) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids.append(points[idx])
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centroids)


def _lloyd(points, K: int, rng, max_iters: int, history: list | None):
    centroids = kmeans_pp_init(points, K, rng)
    assign = np.argmin(_sq_dists(points, centroids), axis=1)
    for _ in range(max_iters):
        for j in range(K):
            members = assign == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
        for j in range(K):
            if not (assign == j).any():
                own = ((points - centroids[assign]) ** 2).sum(axis=1)
                far = int(np.argmax(own))
                centroids[j] = points[far]
                assign[far] = j
        if history is not None:
            history.append(inertia(points, centroids, assign))
        new = np.argmin(_sq_dists(points, centroids), axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
    return centroids, assign


def kmeans(points, K: int, seed: int = 0, max_iters: int = 100, history: list | None = None,
           n_init: int = 10):
    """Lloyd's algorithm from k-means++ starts, best of `n_init` restarts.

    Each run stops when assignments stop changing or after `max_iters`
    updates. An empty cluster is moved onto the point farthest from its own
    centroid. Appends the inertia after every update of the winning run to
    `history` when given. Returns ``(centroids, assignments)``.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2:
        raise ContractError("kmeans expects a 2-D array of points")
    if len(points) < K or K < 1:
        raise ContractError(f"kmeans needs at least K={K} points, got {len(points)}")
    if n_init < 1:
        raise ContractError("kmeans: n_init must be >= 1")
    best = None
    for child in np.random.SeedSequence(seed).spawn(n_init):
        hist = [] if history is not None else None
        cents, assign = _lloyd(points, K, np.random.default_rng(child), max_iters, hist)
        score = inertia(points, cents, assign)
        if best is None or score < best[0]:
            best = (score, cents, assign, hist)
    if history is not None:
        history.extend(best[3])
    return best[1], best[2]


@dataclass
class ClusterModel:
    """K centroids per class plus the global variance used by the magnet loss."""

    classes: np.ndarray  # (C,) class labels, ascending
    centroids: np.ndarray  # (C, K, D)
    assignments: np.ndarray  # (N,) cluster index within the sample's class
    variance: float

    @property
    def K(self) -> int:
        return self.centroids.shape[1]

    def block(self, label) -> int:
        return int(np.searchsorted(self.classes, label))

    def assigned_centroids(self, labels) -> np.ndarray:
        blocks = np.searchsorted(self.classes, labels)
        return self.centroids[blocks, self.assignments]


def refresh_clusters(embeddings, labels, K: int, seed: int = 0, max_iters: int = 100,
                     n_init: int = 10) -> ClusterModel:
    e = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    cents = np.zeros((len(classes), K, e.shape[1]))
    assign = np.zeros(len(labels), dtype=int)
    for i, c in enumerate(classes):
        members = labels == c
        if members.sum() < K:
            raise ContractError(f"class {c} has {members.sum()} samples, fewer than K={K}")
        child_seed = np.random.SeedSequence([seed, int(c)]).generate_state(1)[0]
        cents[i], assign[members] = kmeans(e[members], K, int(child_seed), max_iters, n_init=n_init)
    model = ClusterModel(classes, cents, assign, VARIANCE_FLOOR)
    model.variance = variance_estimate(e, model.assigned_centroids(labels))
    return model


def nearest_imposter_clusters(cluster: tuple, model: ClusterModel, M: int):
    """The M other-class centroids closest to `cluster` = (class label, index).

    Returns ``(ids, short)`` where ids are (class label, index) tuples ordered
    by distance then (class, index), and `short` is True when fewer than M
    imposter clusters exist.
    """
    label, idx = cluster
    own = model.centroids[model.block(label), idx]
    cands = []
    for b, c in enumerate(model.classes):
        if c == label:
            continue
        for j in range(model.K):
            d = float(((model.centroids[b, j] - own) ** 2).sum())
            cands.append((d, int(c), j))
    cands.sort()
    short = len(cands) < M
    return [(c, j) for _, c, j in cands[:M]], short


# ------------------------------------------------------------------------ PCA


@dataclass
class PcaModel:
    mean: np.ndarray
    directions: np.ndarray  # (m, D), rows orthonormal
    variances: np.ndarray  # (m,), nonincreasing
    degenerate: bool = False


def jacobi_eigh(a, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors in columns,
    unsorted.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt((np.triu(a, 1) ** 2).sum())
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def pca_fit(embeddings, m: int = 2) -> PcaModel:
    x = np.asarray(embeddings, dtype=float)
    n, dim = x.shape
    if n < 2:
        raise ContractError("pca_fit needs at least 2 samples")
    if not 1 <= m <= dim:
        raise ContractError(f"pca_fit: m must be in [1, {dim}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    if np.abs(cov).max() <= 1e-300:
        return PcaModel(mean, np.eye(dim)[:m], np.zeros(m), degenerate=True)
    vals, vecs = jacobi_eigh(cov)
    order = np.argsort(-vals, kind="stable")[:m]
    dirs = vecs[:, order].T.copy()
    for row in dirs:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    variances = np.maximum(vals[order], 0.0)
    return PcaModel(mean, dirs, variances, degenerate=bool(variances.max() <= 0))


def pca_project(model: PcaModel, embedding) -> np.ndarray:
    """Works on a single vector or a batch of rows."""
    return (np.asarray(embedding, dtype=float) - model.mean) @ model.directions.T
