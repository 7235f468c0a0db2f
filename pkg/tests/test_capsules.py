import logging

import numpy as np
import pytest

from capsrec.capsules import (RoutingParams, attention_forward,
                              dynamic_routing, interest_loss,
                              interest_loss_backward, interest_loss_forward,
                              label_aware_attention, num_capsules,
                              routing_forward, routing_logit, squash,
                              squash_backward_rows, squash_rows)
from capsrec.errors import DimensionError, DomainError, MaskingViolationError
from capsrec.rng import Rng


def test_squash_pythagorean_example():
    out = squash(np.array([3.0, 4.0]))
    # norm 5 compresses to 25/26; direction (0.6, 0.8) kept.
    assert np.allclose(out, [15.0 / 26.0, 20.0 / 26.0], atol=1e-12)
    assert np.allclose(out, [0.5769, 0.7692], atol=1e-4)


def test_squash_zero_vector():
    assert np.array_equal(squash(np.zeros(4)), np.zeros(4))


def test_squash_norm_and_direction():
    rng = np.random.default_rng(0)
    s = rng.normal(scale=3.0, size=(10_000, 6))
    out = squash_rows(s)
    norms = np.linalg.norm(out, axis=1)
    assert np.all(norms >= 0.0)
    assert np.all(norms < 1.0)
    unit_in = s / np.linalg.norm(s, axis=1, keepdims=True)
    unit_out = out / norms[:, None]
    assert np.max(np.abs(unit_in - unit_out)) < 1e-12


def test_squash_norm_monotone_in_input_norm():
    direction = np.array([1.0, 2.0, -1.0])
    direction /= np.linalg.norm(direction)
    norms = [np.linalg.norm(squash(direction * r)) for r in (0.1, 0.5, 1.0, 5.0, 50.0)]
    assert all(a < b for a, b in zip(norms, norms[1:]))


def test_squash_backward_matches_finite_difference():
    rng = np.random.default_rng(1)
    s = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))

    analytic = squash_backward_rows(s, w)
    eps = 1e-6
    numeric = np.empty_like(s)
    for i in range(s.shape[0]):
        for j in range(s.shape[1]):
            up = s.copy()
            down = s.copy()
            up[i, j] += eps
            down[i, j] -= eps
            numeric[i, j] = (np.sum(squash_rows(up) * w) -
                             np.sum(squash_rows(down) * w)) / (2 * eps)
    assert np.allclose(analytic, numeric, atol=1e-8)


def test_num_capsules_formula():
    assert num_capsules(10) == 3
    assert num_capsules(20) == 4
    assert num_capsules(1) == 1
    assert num_capsules(1024) == 8
    assert num_capsules(7, k_min=3, k_max=8) == 3
    assert num_capsules(4096, k_min=1, k_max=8) == 8
    assert num_capsules(16, k_min=2, k_max=3) == 3


def test_num_capsules_rejects_bad_inputs():
    from capsrec.errors import ConfigError

    with pytest.raises(DomainError):
        num_capsules(0)
    with pytest.raises(ConfigError):
        num_capsules(5, k_min=3, k_max=2)


def test_routing_logit_example():
    u = np.array([1.0, 2.0])
    m = np.diag([1.0, 2.0])
    c = np.array([3.0, 1.0])
    assert routing_logit(u, m, c) == pytest.approx(7.0)


def test_routing_coefficients_sum_to_one_each_iteration():
    rng = np.random.default_rng(2)
    for case in range(100):
        n = int(rng.integers(1, 6))
        k = int(rng.integers(1, 4))
        h = int(rng.integers(1, 5))
        behaviors = rng.normal(size=(n, h))
        params = RoutingParams(bilinear=rng.normal(size=(h, h)), iterations=3,
                               logit_init_sigma=1.0,
                               update_mode="assign" if case % 2 else "accumulate")
        state = routing_forward(behaviors, params, k, rng=Rng(case),
                                record_trace=True)
        assert len(state.coefficient_trace) == 3
        for coeff in state.coefficient_trace:
            assert coeff.shape == (n, k)
            assert np.all(coeff > 0)
            assert np.max(np.abs(coeff.sum(axis=1) - 1.0)) <= 1e-12


def test_routing_single_pair_closed_form():
    rng = np.random.default_rng(3)
    u = rng.normal(size=4)
    m = rng.normal(size=(4, 4))
    params = RoutingParams(bilinear=m, iterations=3, logit_init_sigma=1.0)
    caps = dynamic_routing(u[None, :], params, 1, Rng(0))
    # Capsules are columns of an h x K matrix.
    assert np.allclose(caps.capsules[:, 0], squash(m @ u), atol=1e-12)


def test_routing_update_modes_differ():
    rng = np.random.default_rng(4)
    behaviors = rng.normal(size=(4, 3))
    m = rng.normal(size=(3, 3))
    assign = RoutingParams(bilinear=m, iterations=3, logit_init_sigma=1.0,
                           update_mode="assign")
    accumulate = RoutingParams(bilinear=m, iterations=3, logit_init_sigma=1.0,
                               update_mode="accumulate")
    # Same rng seed gives both modes identical initial logits.
    a = routing_forward(behaviors, assign, 2, rng=Rng(1))
    b = routing_forward(behaviors, accumulate, 2, rng=Rng(1))
    assert not np.allclose(a.capsules, b.capsules)


def test_routing_frozen_coefficients_reproduce_capsules():
    rng = np.random.default_rng(5)
    behaviors = rng.normal(size=(5, 4))
    params = RoutingParams(bilinear=rng.normal(size=(4, 4)), iterations=3,
                           logit_init_sigma=1.0)
    state = routing_forward(behaviors, params, 3, rng=Rng(2))
    replay = routing_forward(behaviors, params, 3,
                             frozen_coefficients=state.coefficients)
    assert np.array_equal(replay.capsules, state.capsules)


def test_label_aware_attention_even_power_oracle():
    caps_rows = np.array([[1.0, 0.0], [0.0, 1.0]])
    candidate = np.array([2.0, 1.0])
    attended, weights = _attend(caps_rows, candidate, p=2)
    # dots (2, 1) -> powers (4, 1) -> softmax.
    expect_w = np.exp([4.0, 1.0])
    expect_w /= expect_w.sum()
    assert np.allclose(weights, expect_w, atol=1e-12)
    assert np.allclose(attended, expect_w @ caps_rows, atol=1e-12)


def _attend(caps_rows, candidate, p):
    attended, state = attention_forward(caps_rows, candidate, p)
    return attended, state.weights


def test_label_aware_attention_large_power_is_hard_max():
    caps_rows = np.array([[1.2, 0.0], [0.8, 0.0], [0.5, 0.1]])
    candidate = np.array([1.0, 0.0])
    attended, weights = _attend(caps_rows, candidate, p=64)
    assert weights[0] > 1.0 - 1e-6
    assert np.allclose(attended, caps_rows[0], atol=1e-6)


def test_label_aware_attention_odd_power_warns_on_negative_dots(caplog):
    caps_rows = np.array([[1.0, 0.0], [-1.0, 0.0]])
    candidate = np.array([1.0, 0.0])
    with caplog.at_level(logging.WARNING):
        attention_forward(caps_rows, candidate, p=3)
    assert any("odd exponent" in r.message for r in caplog.records)


def test_attention_backward_matches_finite_difference():
    from capsrec.capsules import attention_backward

    rng = np.random.default_rng(6)
    caps = rng.normal(size=(3, 4))
    cand = rng.normal(size=4)
    w = rng.normal(size=4)
    p = 2

    attended, state = attention_forward(caps, cand, p)
    d_caps, d_cand = attention_backward(state, caps, cand, p, w)

    eps = 1e-6

    def loss(c_rows, c_vec):
        out, _ = attention_forward(c_rows, c_vec, p)
        return float(out @ w)

    num_caps = np.empty_like(caps)
    for i in range(caps.shape[0]):
        for j in range(caps.shape[1]):
            up = caps.copy()
            down = caps.copy()
            up[i, j] += eps
            down[i, j] -= eps
            num_caps[i, j] = (loss(up, cand) - loss(down, cand)) / (2 * eps)
    num_cand = np.empty_like(cand)
    for j in range(cand.size):
        up = cand.copy()
        down = cand.copy()
        up[j] += eps
        down[j] -= eps
        num_cand[j] = (loss(caps, up) - loss(caps, down)) / (2 * eps)

    assert np.allclose(d_caps, num_caps, atol=1e-7)
    assert np.allclose(d_cand, num_cand, atol=1e-7)


def test_interest_loss_uniform_cases():
    attended = np.array([1.0, 0.0])
    positive = np.array([0.0, 1.0])   # score 0
    one_neg = np.array([[0.0, 2.0]])  # score 0
    assert interest_loss(attended, positive, one_neg) == pytest.approx(np.log(2.0), abs=1e-12)
    two_neg = np.array([[0.0, 2.0], [0.0, -5.0]])
    assert interest_loss(attended, positive, two_neg) == pytest.approx(np.log(3.0), abs=1e-12)


def test_interest_loss_saturated_is_tiny():
    attended = np.array([10.0, 0.0])
    positive = np.array([10.0, 0.0])
    negatives = np.array([[-10.0, 0.0]])
    assert interest_loss(attended, positive, negatives) < 1e-12


def test_interest_loss_stable_for_large_scores():
    attended = np.array([1000.0])
    positive = np.array([1.0])
    negatives = np.array([[0.999], [0.5]])
    loss = interest_loss(attended, positive, negatives)
    assert np.isfinite(loss)
    assert loss > 0


def test_interest_loss_masking_violation():
    attended = np.array([1.0, 2.0])
    positive = np.array([0.5, -0.5])
    negatives = np.array([[0.5, -0.5], [1.0, 1.0]])
    with pytest.raises(MaskingViolationError):
        interest_loss(attended, positive, negatives)


def test_interest_loss_requires_negatives():
    with pytest.raises(DomainError):
        interest_loss(np.ones(2), np.ones(2), np.empty((0, 2)))


def test_interest_loss_backward_matches_finite_difference():
    rng = np.random.default_rng(7)
    attended = rng.normal(size=3)
    positive = rng.normal(size=3)
    negatives = rng.normal(size=(4, 3))

    _, state = interest_loss_forward(attended, positive, negatives)
    d_att, d_pos, d_neg = interest_loss_backward(state, attended, positive, negatives)

    eps = 1e-6

    def loss(a, p, n):
        value, _ = interest_loss_forward(a, p, n)
        return value

    for j in range(3):
        up, down = attended.copy(), attended.copy()
        up[j] += eps
        down[j] -= eps
        assert (loss(up, positive, negatives) - loss(down, positive, negatives)) / (2 * eps) == pytest.approx(d_att[j], abs=1e-8)
        up, down = positive.copy(), positive.copy()
        up[j] += eps
        down[j] -= eps
        assert (loss(attended, up, negatives) - loss(attended, down, negatives)) / (2 * eps) == pytest.approx(d_pos[j], abs=1e-8)
    for i in range(4):
        for j in range(3):
            up, down = negatives.copy(), negatives.copy()
            up[i, j] += eps
            down[i, j] -= eps
            assert (loss(attended, positive, up) - loss(attended, positive, down)) / (2 * eps) == pytest.approx(d_neg[i, j], abs=1e-8)


def test_label_aware_attention_public_wrapper():
    from capsrec.capsules import InterestCapsules

    rng = np.random.default_rng(8)
    caps = InterestCapsules(capsules=rng.normal(size=(4, 3)))  # h x K
    cand = rng.normal(size=4)
    attended, weights = label_aware_attention(caps, cand, p=2)
    direct, state = attention_forward(caps.capsules.T, cand, 2)
    assert np.array_equal(attended, direct)
    assert np.array_equal(weights, state.weights)


def test_dimension_errors():
    with pytest.raises(DimensionError):
        routing_logit(np.ones(3), np.ones((2, 2)), np.ones(2))
    params = RoutingParams(bilinear=np.ones((3, 3)), iterations=3,
                           logit_init_sigma=1.0)
    with pytest.raises(DimensionError):
        routing_forward(np.ones((2, 4)), params, 2, rng=Rng(0))
