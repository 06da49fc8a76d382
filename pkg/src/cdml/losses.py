"""Metric-learning objectives and the cross-entropy baseline.

Each loss returns its value together with gradients with respect to the
embeddings (and any head parameters). Batches of embeddings are arrays of
shape (N, D).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from cdml.errors import ContractError, EvaluationError
from cdml.tensor import sigmoid, softmax

PROB_CLAMP = 1e-12
VARIANCE_FLOOR = 1e-8
DEFAULT_MARGIN = 0.2
DEFAULT_ALPHA = 1.0
DEFAULT_K = 3


class TripletIndices(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class MagnetTerms:
    alpha: float = DEFAULT_ALPHA
    K: int = DEFAULT_K
    variance: float = 1.0

    def __post_init__(self):
        if self.K < 1:
            raise ContractError("magnet: K must be >= 1")
        if not self.variance > 0:
            raise ContractError("magnet: variance must be positive")


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise EvaluationError("non-finite embedding")


# ------------------------------------------------------------------ pairwise


def pairwise_loss(emb_a, emb_b, head_weights, head_bias, target):
    """Siamese BCE on a learned affine map of the elementwise L1 difference.

    Works on one pair (vectors) or a batch of pairs (rows); the batch value is
    the mean. Returns ``(loss, grads)`` with grads keyed ``a``, ``b``, ``w``,
    ``bias``.
    """
    a = np.asarray(emb_a, dtype=float)
    b = np.asarray(emb_b, dtype=float)
    _finite(a, b)
    w = np.asarray(head_weights, dtype=float).reshape(-1)
    t = np.asarray(target, dtype=float)
    if np.any((t != 0) & (t != 1)):
        raise ContractError("pairwise target must be 0 or 1")
    single = a.ndim == 1
    a2, b2 = np.atleast_2d(a), np.atleast_2d(b)
    t = np.broadcast_to(t, (a2.shape[0],))
    diff = a2 - b2
    d = np.abs(diff)
    z = d @ w + float(head_bias)
    s = sigmoid(z)
    sc = np.clip(s, PROB_CLAMP, 1.0 - PROB_CLAMP)
    losses = -(t * np.log(sc) + (1.0 - t) * np.log(1.0 - sc))
    n = a2.shape[0]
    # derivative of the clamped log terms is zero outside the clamp range
    dz = np.where((s > PROB_CLAMP) & (s < 1.0 - PROB_CLAMP), s - t, 0.0) / n
    dd = dz[:, None] * w[None, :]
    da = dd * np.sign(diff)
    grads = {
        "a": da[0] if single else da,
        "b": -da[0] if single else -da,
        "w": dz @ d,
        "bias": float(dz.sum()),
    }
    return float(losses.mean()), grads


# ------------------------------------------------------------------- triplet


def _check_triplet(triplet, n, labels):
    a, p, q = triplet
    for i in (a, p, q):
        if not 0 <= i < n:
            raise ContractError(f"triplet index {i} outside batch of {n}")
    if a == p:
        raise ContractError("triplet anchor and positive must differ")
    if a == q or p == q:
        raise ContractError("triplet negative must differ from anchor and positive")
    if labels is not None:
        if labels[a] != labels[p]:
            raise ContractError("triplet anchor and positive have different labels")
        if labels[a] == labels[q]:
            raise ContractError("triplet anchor and negative share a label")


def _unit(v):
    norm = np.sqrt(v @ v)
    return norm, (v / norm if norm > 0 else np.zeros_like(v))


def triplet_loss(embeddings, triplet, margin: float = DEFAULT_MARGIN, labels=None):
    """Hinge on Euclidean distances for a single triplet.

    Returns ``(loss, grad)``, grad shaped like `embeddings`.
    """
    e = np.asarray(embeddings, dtype=float)
    _finite(e)
    if margin <= 0:
        raise ContractError("margin must be positive")
    _check_triplet(triplet, e.shape[0], labels)
    a, p, q = triplet
    d_ap, u_ap = _unit(e[a] - e[p])
    d_an, u_an = _unit(e[a] - e[q])
    value = d_ap - d_an + margin
    grad = np.zeros_like(e)
    if value <= 0:
        return 0.0, grad
    grad[a] += u_ap - u_an
    grad[p] -= u_ap
    grad[q] += u_an
    return float(value), grad


def triplet_batch_loss(embeddings, triplets, margin: float = DEFAULT_MARGIN, labels=None):
    """Mean triplet loss over `triplets`; zero for an empty list."""
    e = np.asarray(embeddings, dtype=float)
    _finite(e)
    grad = np.zeros_like(e)
    if len(triplets) == 0:
        return 0.0, grad
    if margin <= 0:
        raise ContractError("margin must be positive")
    for t in triplets:
        _check_triplet(t, e.shape[0], labels)
    idx = np.asarray(triplets, dtype=int)
    a, p, q = idx[:, 0], idx[:, 1], idx[:, 2]
    v_ap, v_an = e[a] - e[p], e[a] - e[q]
    d_ap = np.sqrt((v_ap * v_ap).sum(axis=1))
    d_an = np.sqrt((v_an * v_an).sum(axis=1))
    u_ap = np.divide(v_ap, d_ap[:, None], out=np.zeros_like(v_ap), where=d_ap[:, None] > 0)
    u_an = np.divide(v_an, d_an[:, None], out=np.zeros_like(v_an), where=d_an[:, None] > 0)
    value = d_ap - d_an + margin
    on = (value > 0)[:, None]
    n = len(idx)
    np.add.at(grad, a, np.where(on, u_ap - u_an, 0.0))
    np.add.at(grad, p, np.where(on, -u_ap, 0.0))
    np.add.at(grad, q, np.where(on, u_an, 0.0))
    return float(np.maximum(value, 0.0).sum() / n), grad / n


def distance_matrix(embeddings) -> np.ndarray:
    e = np.asarray(embeddings, dtype=float)
    diff = e[:, None, :] - e[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def mine_semi_hard(embeddings, labels, margin: float = DEFAULT_MARGIN) -> list[TripletIndices]:
    """Pick one negative for every ordered (anchor, positive) same-class pair.

    Preference goes to the closest negative with d(a,p) < d(a,n) < d(a,p) + margin.
    Failing that, the farthest negative with d(a,n) <= d(a,p) is used; pairs with
    neither are skipped. Ties resolve to the lowest batch index.
    """
    labels = np.asarray(labels)
    dist = distance_matrix(embeddings)
    n = len(labels)
    out = []
    for a in range(n):
        neg = labels != labels[a]
        if not neg.any():
            continue
        d_an = dist[a]
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            d_ap = dist[a, p]
            semi = neg & (d_an > d_ap) & (d_an < d_ap + margin)
            if semi.any():
                cand = np.where(semi, d_an, np.inf)
                out.append(TripletIndices(a, p, int(np.argmin(cand))))
                continue
            hard = neg & (d_an <= d_ap)
            if hard.any():
                cand = np.where(hard, d_an, -np.inf)
                out.append(TripletIndices(a, p, int(np.argmax(cand))))
    return out


# -------------------------------------------------------------------- magnet


def variance_estimate(embeddings, assigned_centroids, floor: float = VARIANCE_FLOOR, strict: bool = False) -> float:
    """Mean squared distance to the assigned centroid, with N - 1 normalisation.

    `strict` averages unsquared norms instead, an alternative reading kept
    for comparison.
    """
    e = np.asarray(embeddings, dtype=float)
    mu = np.asarray(assigned_centroids, dtype=float)
    n = e.shape[0]
    if n < 2:
        raise ContractError("variance_estimate needs at least 2 samples")
    sq = ((e - mu) ** 2).sum(axis=1)
    total = np.sqrt(sq).sum() if strict else sq.sum()
    return max(float(total / (n - 1)), floor)


def magnet_loss(embeddings, labels, centroids, assignments, terms: MagnetTerms,
                centroid_labels=None, strict: bool = False):
    """Magnet loss with fixed centroids.

    `centroids` is (C, K, D) for C classes; `assignments[n]` is the cluster
    index of sample n inside its own class. `centroid_labels[c]` gives the
    class label of centroid block c (defaults to ``range(C)``). With `strict`,
    distances are taken as ``||r + mu||`` (the sign-flipped variant).

    Returns ``(loss, grad)``; the loss is the batch mean of the per-sample
    hinge.
    """
    e = np.asarray(embeddings, dtype=float)
    _finite(e)
    labels = np.asarray(labels)
    mu = np.asarray(centroids, dtype=float)
    n_cls, k, dim = mu.shape
    cls_ids = np.arange(n_cls) if centroid_labels is None else np.asarray(centroid_labels)
    if n_cls < 2:
        raise ContractError("magnet loss needs clusters from at least two classes")
    pos = {c: i for i, c in enumerate(cls_ids.tolist())}
    try:
        own_block = np.array([pos[c] for c in labels.tolist()])
    except KeyError as err:
        raise ContractError(f"label {err.args[0]} has no clusters") from None
    assignments = np.asarray(assignments)
    sign = 1.0 if strict else -1.0
    scale = 1.0 / (2.0 * terms.variance)

    own_mu = mu[own_block, assignments]  # (N, D)
    own_vec = e + sign * own_mu
    own_sq = (own_vec ** 2).sum(axis=1)
    all_mu = mu.reshape(n_cls * k, dim)
    all_vec = e[:, None, :] + sign * all_mu[None, :, :]  # (N, C*K, D)
    all_sq = (all_vec ** 2).sum(axis=-1)
    imposter = np.repeat(np.arange(n_cls), k)[None, :] != own_block[:, None]
    logits = np.where(imposter, -scale * all_sq, -np.inf)
    top = logits.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    pre = scale * own_sq + terms.alpha + lse
    active = pre > 0
    n = e.shape[0]
    loss = float(np.where(active, pre, 0.0).mean())

    weights = np.exp(logits - lse[:, None])  # softmax over imposters, zero elsewhere
    grad = 2.0 * scale * own_vec - 2.0 * scale * np.einsum("nj,njd->nd", weights, all_vec)
    grad = np.where(active[:, None], grad, 0.0) / n
    return loss, grad


# ------------------------------------------------------------- cross-entropy


def cross_entropy(probs, labels):
    """Mean ``-ln p[label]`` with the gradient taken w.r.t. the softmax logits.

    Accepts one probability vector or a batch of them.
    """
    p = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    y = np.atleast_1d(labels).astype(int)
    if y.shape[0] != p2.shape[0]:
        raise ContractError("one label per probability row required")
    if np.any((y < 0) | (y >= p2.shape[1])):
        raise ContractError(f"label out of range for {p2.shape[1]} classes")
    picked = np.maximum(p2[np.arange(len(y)), y], PROB_CLAMP)
    loss = float(-np.log(picked).mean())
    grad = p2.copy()
    grad[np.arange(len(y)), y] -= 1.0
    grad /= len(y)
    return loss, (grad[0] if single else grad)


def cross_entropy_from_logits(logits, labels):
    return cross_entropy(softmax(logits), labels)
