import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cdml import losses as L
from cdml import tensor as T
from cdml.errors import ContractError, EvaluationError
from cdml.losses import MagnetTerms, TripletIndices
from oracles import exhaustive_miner, magnet_direct, variance_direct

# ------------------------------------------------------------------ pairwise


def test_pairwise_equal_embeddings_zero_head(rng):
    e = rng.normal(size=64)
    for t in (0, 1):
        value, _ = L.pairwise_loss(e, e, np.zeros(64), 0.0, t)
        assert value == pytest.approx(math.log(2), abs=1e-12)


def test_pairwise_confident_match_is_zero_loss():
    a, b = np.zeros(4), np.ones(4)
    value, _ = L.pairwise_loss(a, b, np.zeros(4), 60.0, 1)
    # probabilities are clamped at 1e-12, so the loss bottoms out there
    assert value <= 1.1e-12
    value, _ = L.pairwise_loss(a, b, np.zeros(4), -60.0, 0)
    assert value <= 1.1e-12


def test_pairwise_gradients(rng):
    a, b = rng.normal(size=(2, 5, 8))
    w, bias = rng.normal(size=8), 0.3
    t = np.array([1, 0, 1, 1, 0])
    _, g = L.pairwise_loss(a, b, w, bias, t)
    # some coordinates have gradients near 1e-5, where eps=1e-5 is roundoff-bound;
    # the nearest |a - b| kink is far further away than eps=1e-4
    assert np.abs(a - b).min() > 1e-2
    eps = 1e-4
    assert T.grad_check(lambda v: (L.pairwise_loss(v, b, w, bias, t)[0], g["a"]), a, eps) < 1e-6
    assert T.grad_check(lambda v: (L.pairwise_loss(a, v, w, bias, t)[0], g["b"]), b, eps) < 1e-6
    assert T.grad_check(lambda v: (L.pairwise_loss(a, b, v, bias, t)[0], g["w"]), w, eps) < 1e-6
    fb = lambda v: (L.pairwise_loss(a, b, w, float(v[0]), t)[0], np.array([g["bias"]]))
    assert T.grad_check(fb, np.array([bias]), eps) < 1e-6


def test_pairwise_errors():
    with pytest.raises(EvaluationError):
        L.pairwise_loss(np.array([np.nan]), np.zeros(1), np.zeros(1), 0.0, 1)
    with pytest.raises(ContractError):
        L.pairwise_loss(np.zeros(1), np.zeros(1), np.zeros(1), 0.0, 2)


# ------------------------------------------------------------------- triplet


def test_triplet_identical_embeddings_gives_margin():
    e = np.zeros((3, 4))
    assert L.triplet_loss(e, TripletIndices(0, 1, 2), 0.2)[0] == pytest.approx(0.2)


def test_triplet_inactive_hinge():
    e = np.array([[0.0, 0.0], [0.0, 0.0], [1.2, 0.0]])
    value, grad = L.triplet_loss(e, TripletIndices(0, 1, 2), 0.2)
    assert value == 0 and not grad.any()


def test_triplet_gradient(rng):
    e = rng.normal(size=(6, 8))
    t = TripletIndices(0, 1, 2)
    margin = 0.2 + np.linalg.norm(e[0] - e[2])  # keeps the hinge active
    _, g = L.triplet_loss(e, t, margin)
    assert T.grad_check(lambda v: (L.triplet_loss(v, t, margin)[0], g), e) < 1e-6


def test_triplet_batch_matches_single_mean(rng):
    e = rng.normal(size=(8, 4))
    ts = [TripletIndices(0, 1, 2), TripletIndices(3, 4, 5), TripletIndices(0, 6, 7)]
    single = [L.triplet_loss(e, t, 1.0) for t in ts]
    value, grad = L.triplet_batch_loss(e, ts, 1.0)
    assert value == pytest.approx(np.mean([s[0] for s in single]), abs=1e-12)
    np.testing.assert_allclose(grad, sum(s[1] for s in single) / 3, atol=1e-12)
    assert L.triplet_batch_loss(e, [], 1.0)[0] == 0.0


@pytest.mark.parametrize("bad", [(0, 0, 1), (0, 1, 1), (0, 1, 9)])
def test_triplet_degenerate(bad):
    with pytest.raises(ContractError):
        L.triplet_loss(np.zeros((3, 2)), TripletIndices(*bad))


def test_triplet_label_invariants():
    with pytest.raises(ContractError):
        L.triplet_loss(np.zeros((3, 2)), TripletIndices(0, 1, 2), labels=[0, 1, 2])
    with pytest.raises(ContractError):
        L.triplet_loss(np.zeros((3, 2)), TripletIndices(0, 1, 2), labels=[0, 0, 0])


def test_miner_hand_example():
    e = np.array([[0.0], [0.1], [1.0]])
    out = L.mine_semi_hard(e, [0, 0, 1], margin=2.0)
    assert TripletIndices(0, 1, 2) in out


def test_miner_identical_embeddings_fallback():
    labels = [0, 0, 1, 1, 2]
    out = L.mine_semi_hard(np.zeros((5, 3)), labels, 0.2)
    pairs = [(a, p) for a in range(5) for p in range(5) if a != p and labels[a] == labels[p]]
    assert [(t.anchor, t.positive) for t in out] == pairs
    assert all(labels[t.negative] != labels[t.anchor] for t in out)


def test_miner_single_class_is_empty(rng):
    assert L.mine_semi_hard(rng.normal(size=(4, 2)), [1, 1, 1, 1]) == []


def test_miner_matches_exhaustive_oracle_32(rng):
    e = rng.normal(size=(32, 6)) * 0.15
    labels = rng.integers(0, 3, 32)
    assert [tuple(t) for t in L.mine_semi_hard(e, labels, 0.2)] == exhaustive_miner(e, labels, 0.2)


@given(st.integers(2, 32), st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.2, 1.0]))
def test_miner_matches_exhaustive_oracle(n, seed, margin):
    r = np.random.default_rng(seed)
    e = r.normal(size=(n, 3)) * 0.3
    labels = r.integers(0, 3, n)
    assert [tuple(t) for t in L.mine_semi_hard(e, labels, margin)] == exhaustive_miner(e, labels, margin)


# -------------------------------------------------------------------- magnet


def test_variance_examples():
    e = np.array([[1.0], [-1.0]])
    assert L.variance_estimate(e, np.zeros((2, 1))) == 2.0
    assert L.variance_estimate(e, e) == L.VARIANCE_FLOOR
    with pytest.raises(ContractError):
        L.variance_estimate(e[:1], e[:1])


def test_variance_matches_direct(rng):
    e, mu = rng.normal(size=(2, 40, 5))
    assert abs(L.variance_estimate(e, mu) - variance_direct(e, mu)) < 1e-12


def test_magnet_far_imposter_gives_zero():
    alpha, var = 1.0, 0.5
    d2 = 2 * var * (alpha + 10)
    cents = np.array([[[0.0, 0.0]], [[math.sqrt(d2), 0.0]]])
    value, grad = L.magnet_loss(np.zeros((1, 2)), [0], cents, [0], MagnetTerms(alpha, 1, var))
    assert value == 0.0 and not grad.any()


def test_magnet_symmetric_configuration():
    # sample at the origin, own centroid and one imposter both at distance 1
    cents = np.array([[[1.0, 0.0]], [[-1.0, 0.0]]])
    value, _ = L.magnet_loss(np.zeros((1, 2)), [0], cents, [0], MagnetTerms(0.0, 1, 1.0))
    assert value == 0.0
    # three equidistant imposter clusters: pre-hinge value is ln 3
    cents = np.zeros((2, 3, 2))
    cents[0, :] = [1.0, 0.0]
    cents[1] = [[-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
    value, _ = L.magnet_loss(np.zeros((1, 2)), [0], cents, [0], MagnetTerms(0.0, 3, 1.0))
    assert value == pytest.approx(math.log(3), abs=1e-12)


def _magnet_case(rng, n=12, c=3, k=2, d=4):
    e = rng.normal(size=(n, d))
    labels = rng.integers(0, c, n)
    cents = rng.normal(size=(c, k, d))
    assign = rng.integers(0, k, n)
    return e, labels, cents, assign


def test_magnet_matches_direct(rng):
    for _ in range(5):
        e, labels, cents, assign = _magnet_case(rng)
        var = L.variance_estimate(e, cents[labels, assign])
        terms = MagnetTerms(0.7, 2, var)
        value, _ = L.magnet_loss(e, labels, cents, assign, terms)
        ref = magnet_direct(e, labels, cents, assign, 0.7, var)
        assert abs(value - ref) <= 1e-10 * max(1.0, abs(ref))


def test_magnet_gradient(rng):
    e, labels, cents, assign = _magnet_case(rng)
    terms = MagnetTerms(-2.0, 2, 1.5)  # negative alpha keeps every hinge active
    _, g = L.magnet_loss(e, labels, cents, assign, terms)
    assert np.abs(g).max() > 0
    assert T.grad_check(lambda v: (L.magnet_loss(v, labels, cents, assign, terms)[0], g), e) < 1e-6


def test_magnet_gradient_strict(rng):
    e, labels, cents, assign = _magnet_case(rng)
    terms = MagnetTerms(-2.0, 2, 1.5)
    _, g = L.magnet_loss(e, labels, cents, assign, terms, strict=True)
    f = lambda v: (L.magnet_loss(v, labels, cents, assign, terms, strict=True)[0], g)
    assert T.grad_check(f, e) < 1e-6


def test_magnet_stable_for_far_points(rng):
    e, labels, cents, assign = _magnet_case(rng)
    value, grad = L.magnet_loss(e * 1e3, labels, cents, assign, MagnetTerms(1.0, 2, 1e-3))
    assert math.isfinite(value) and np.all(np.isfinite(grad))


def test_magnet_needs_two_classes():
    with pytest.raises(ContractError):
        L.magnet_loss(np.zeros((2, 2)), [0, 0], np.zeros((1, 1, 2)), [0, 0], MagnetTerms(1.0, 1, 1.0))
    with pytest.raises(ContractError):
        MagnetTerms(variance=0.0)


def test_magnet_centroid_labels(rng):
    e, labels, cents, assign = _magnet_case(rng)
    terms = MagnetTerms(0.5, 2, 1.0)
    base = L.magnet_loss(e, labels, cents, assign, terms)[0]
    shifted = L.magnet_loss(e, labels + 10, cents, assign, terms, centroid_labels=[10, 11, 12])[0]
    assert base == shifted
    with pytest.raises(ContractError, match="no clusters"):
        L.magnet_loss(e, labels + 5, cents, assign, terms)


# ------------------------------------------------------------- cross-entropy


def test_cross_entropy_examples():
    assert L.cross_entropy(np.full(3, 1 / 3), 1)[0] == pytest.approx(math.log(3))
    assert L.cross_entropy(np.array([0.0, 1.0, 0.0]), 1)[0] == 0.0
    with pytest.raises(ContractError):
        L.cross_entropy(np.full(3, 1 / 3), 3)


def test_cross_entropy_logit_gradient(rng):
    z = rng.normal(size=(5, 3))
    y = np.array([0, 1, 2, 2, 0])
    _, g = L.cross_entropy_from_logits(z, y)
    assert T.grad_check(lambda v: (L.cross_entropy_from_logits(v, y)[0], g), z) < 1e-6


@given(arrays(np.float64, 3, elements=st.floats(-30, 30)), st.integers(0, 2))
def test_cross_entropy_properties(z, y):
    value, g = L.cross_entropy_from_logits(z, y)
    assert value >= 0
    assert abs(g.sum()) < 1e-12
    assert g[y] <= 0


@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5)), st.floats(0.01, 2.0))
def test_triplet_loss_bounded_by_margin_on_collapse(e, margin):
    # translating every embedding leaves the loss unchanged
    t = TripletIndices(0, 1, 2)
    a = L.triplet_loss(e, t, margin)[0]
    b = L.triplet_loss(e + 3.0, t, margin)[0]
    assert a >= 0 and abs(a - b) < 1e-9
