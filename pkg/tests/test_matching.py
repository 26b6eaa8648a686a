import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from concat_lab.diffcore import ShapeError, Tensor, backward, gradcheck, ops
from concat_lab.matching import (
    InfeasibleMatchingError,
    LossWeights,
    focal_loss,
    hungarian,
    mask_cost,
    mask_loss,
    match_cost_matrix,
    solve_assignment,
)

from .oracles import brute_force_assignment

EPS = 1e-7


def test_focal_examples():
    assert focal_loss(np.array(1 - EPS), np.array(1.0)).item() < 1e-6
    assert focal_loss(np.array(0.5), np.array(1.0)).item() == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-9)
    assert focal_loss(np.array(0.5), np.array(0.0)).item() == pytest.approx(0.75 * 0.25 * math.log(2), abs=1e-9)
    assert focal_loss(np.array(0.5), np.array(1.0)).item() == pytest.approx(0.043322, abs=1e-6)
    assert focal_loss(np.array(0.5), np.array(0.0)).item() == pytest.approx(0.129966, abs=1e-6)
    with pytest.raises(ShapeError):
        focal_loss(np.full(3, 0.5), np.ones(2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=10), st.integers(0, 2**31 - 1))
def test_focal_reduces_to_bce(probs, seed):
    p = np.array(probs)
    y = np.random.default_rng(seed).integers(0, 2, size=p.shape).astype(float)
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    # alpha 0.5 halves both terms, so twice the focal value is the plain BCE
    assert 2 * focal_loss(p, y, alpha=0.5, gamma=0.0).item() == pytest.approx(bce, abs=1e-12)


def test_focal_gradcheck(rng):
    p = Tensor(rng.uniform(0.05, 0.95, size=(4, 5)), requires_grad=True)
    y = (rng.random((4, 5)) < 0.3).astype(float)
    assert gradcheck(lambda: focal_loss(p, y), [p], h=1e-6).passed


def test_mask_loss_examples():
    assert mask_loss(np.full((4, 4), 40.0), np.ones((4, 4))).item() < 1e-6
    assert mask_loss(np.full((4, 4), -40.0), np.zeros((4, 4))).item() < 1e-6
    gt = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert mask_loss(np.zeros((2, 2)), gt).item() == pytest.approx(math.log(2) + 0.4, abs=1e-9)
    assert mask_loss(np.zeros((2, 2)), gt).item() == pytest.approx(1.0931, abs=1e-4)
    with pytest.raises(ShapeError):
        mask_loss(np.zeros((2, 2)), np.zeros((3, 2)))


def test_mask_loss_gradcheck(rng):
    logits = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    gt = (rng.random((5, 5)) < 0.4).astype(float)
    assert gradcheck(lambda: mask_loss(logits, gt), [logits], h=1e-6).passed


def test_mask_cost_agrees_with_mask_loss(rng):
    logits = rng.normal(scale=3, size=(4, 6, 6))
    gts = (rng.random((3, 6, 6)) < 0.5).astype(float)
    c = mask_cost(logits, gts)
    for k in range(4):
        for o in range(3):
            assert c[k, o] == pytest.approx(mask_loss(logits[k], gts[o]).item(), abs=1e-12)


def _one_hot_probs(labels, n):
    p = np.full((len(labels), n), EPS)
    p[np.arange(len(labels)), labels] = 1 - EPS
    return p


def test_match_cost_examples(rng):
    gts = np.zeros((2, 4, 4))
    gts[0, :2] = 1
    gts[1, 2:] = 1
    logits = np.where(gts > 0, 40.0, -40.0)
    cost = match_cost_matrix(_one_hot_probs([0, 1], 3), logits, [0, 1], gts)
    assert cost[0, 0] < 1e-5 and cost[1, 1] < 1e-5
    assert cost[0, 0] < min(cost[0, 1], cost[1, 0]) and cost[1, 1] < min(cost[0, 1], cost[1, 0])

    probs = rng.uniform(0.01, 0.99, size=(4, 5))
    logits = rng.normal(size=(4, 4, 4))
    masks = (rng.random((3, 4, 4)) < 0.5).astype(float)
    cost = match_cost_matrix(probs, logits, [1, 4, 0], masks)
    assert hungarian(cost).total_cost == pytest.approx(brute_force_assignment(cost), abs=1e-12)


def test_match_cost_equals_losses_elementwise(rng):
    probs = rng.uniform(0.01, 0.99, size=(3, 4))
    logits = rng.normal(size=(3, 5, 5))
    masks = (rng.random((2, 5, 5)) < 0.5).astype(float)
    labels = [2, 0]
    cost = match_cost_matrix(probs, logits, labels, masks)
    for k in range(3):
        for o in range(2):
            onehot = np.eye(4)[labels[o]]
            want = focal_loss(probs[k], onehot).item() + mask_loss(logits[k], masks[o]).item()
            assert cost[k, o] == pytest.approx(want, abs=1e-12)


def test_match_cost_permutation_equivariant(rng):
    probs = rng.uniform(0.01, 0.99, size=(5, 4))
    logits = rng.normal(size=(5, 4, 4))
    masks = (rng.random((4, 4, 4)) < 0.5).astype(float)
    labels = np.array([0, 3, 1, 1])
    perm = rng.permutation(4)
    a = match_cost_matrix(probs, logits, labels, masks)
    b = match_cost_matrix(probs, logits, labels[perm], masks[perm])
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_match_cost_infeasible():
    with pytest.raises(InfeasibleMatchingError):
        match_cost_matrix(np.full((1, 3), 0.5), np.zeros((1, 2, 2)), [0, 1], np.zeros((2, 2, 2)))


def test_hungarian_examples():
    a = hungarian([[0.0, 1.0], [1.0, 0.0]])
    assert a.query_to_segment == [0, 1] and a.total_cost == 0.0
    b = hungarian([[1.0], [0.0], [2.0]])
    assert b.query_to_segment == [None, 0, None] and b.n_matched == 1
    empty = hungarian(np.zeros((3, 0)))
    assert empty.query_to_segment == [None] * 3 and empty.total_cost == 0.0


def test_hungarian_errors():
    with pytest.raises(ValueError, match="non-finite"):
        hungarian([[0.0, np.nan], [1.0, 0.0]])
    with pytest.raises(ValueError, match="non-finite"):
        hungarian([[np.inf]])
    with pytest.raises(InfeasibleMatchingError):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        hungarian(np.zeros(3))


def test_hungarian_ties_prefer_lowest_query():
    # all-equal costs: segment 0 takes query 0, segment 1 takes query 1
    assert hungarian(np.zeros((4, 2))).query_to_segment == [0, 1, None, None]
    assert hungarian(np.ones((3, 1))).query_to_segment == [0, None, None]


@pytest.mark.parametrize("backend", ["numpy", "numba", "python"])
def test_hungarian_against_brute_force_and_scipy(backend):
    r = np.random.default_rng(11)
    for _ in range(150):
        k = int(r.integers(1, 7))
        o = int(r.integers(0, k + 1))
        cost = r.normal(size=(k, o))
        if r.random() < 0.3:
            cost = np.round(cost)  # exercise ties
        a = hungarian(cost, backend=backend)
        assert a.total_cost == pytest.approx(brute_force_assignment(cost), abs=1e-9)
        if o:
            rows, cols = linear_sum_assignment(cost)
            assert a.total_cost == pytest.approx(cost[rows, cols].sum(), abs=1e-9)


def test_backends_agree_exactly():
    r = np.random.default_rng(5)
    for _ in range(100):
        k = int(r.integers(1, 13))
        o = int(r.integers(0, k + 1))
        cost = np.round(r.normal(size=(o, k)), 1)
        outs = [solve_assignment(cost, b).tolist() for b in ("numpy", "numba", "python")]
        assert outs[0] == outs[1] == outs[2]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 2**31 - 1))
def test_hungarian_properties(k, o, seed):
    o = min(o, k)
    cost = np.random.default_rng(seed).uniform(-5, 5, size=(k, o))
    a = hungarian(cost)
    seg = [s for s in a.query_to_segment if s is not None]
    assert len(seg) == o and len(set(seg)) == o  # injective, every segment matched
    assert a.total_cost <= brute_force_assignment(cost) + 1e-9
    assert a.total_cost == pytest.approx(sum(cost[q, s] for q, s in a.matched_pairs()))
    # shifting all entries by a constant never changes the assignment
    assert hungarian(cost + 3.0).query_to_segment == a.query_to_segment


def test_loss_weights_validation():
    with pytest.raises(ValueError, match="lambda_r"):
        LossWeights(lambda_r=-1)
    with pytest.raises(ValueError, match="bandwidths"):
        LossWeights(bandwidths=[])
    with pytest.raises(ValueError):
        LossWeights(tau=0)


def test_focal_gradient_sign():
    p = Tensor(np.array([0.3, 0.7]), requires_grad=True)
    g = backward(focal_loss(p, np.array([1.0, 0.0])))[p]
    assert g[0] < 0 < g[1]
    assert np.isfinite(ops.sum(p).item())
