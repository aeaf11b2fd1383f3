"""Scaling-factor math: beta, momentum blending, smoothing, Pearson."""

from __future__ import annotations

import numpy as np
import pytest

from quaff.scaling import (
    ScalingState,
    beta_from_maxima,
    compute_beta,
    momentum_update,
    pearson_similarity,
    smooth_factors,
)
from quaff.tensor import random_matrix


def test_beta_hand_example():
    # one outlier channel with colmax 9 and weight max 1 -> sqrt(9) = 3
    X = np.zeros((2, 4), dtype=np.float32)
    X[0, 1] = 9.0
    X[1, 0] = 0.5
    beta = compute_beta(X, w_row_abs_max=[1.0], outliers=[1])
    np.testing.assert_array_equal(beta, [1.0, 3.0, 1.0, 1.0])


def test_beta_clamped_at_one():
    X = np.full((1, 3), 0.25, dtype=np.float32)
    beta = compute_beta(X, [1.0], [2])
    np.testing.assert_array_equal(beta, [1.0, 1.0, 1.0])  # sqrt(0.25)=0.5 -> 1


def test_beta_empty_outliers_all_ones():
    X = random_matrix(3, 5, seed=0)
    np.testing.assert_array_equal(compute_beta(X, [], []), np.ones(5))


def test_beta_token_permutation_invariant():
    X = random_matrix(6, 4, seed=1) * 10
    b1 = compute_beta(X, [0.5, 2.0], [1, 3])
    b2 = compute_beta(X[::-1].copy(), [0.5, 2.0], [1, 3])
    np.testing.assert_array_equal(b1, b2)


def test_beta_monotone_in_input_scale():
    X = np.abs(random_matrix(4, 6, seed=2)) + 1.0
    prev = compute_beta(X, [1.0, 1.0], [0, 5])
    for c in (2.0, 4.0, 16.0):
        cur = compute_beta(c * X, [1.0, 1.0], [0, 5])
        assert np.all(cur >= prev)
        prev = cur


def test_beta_rejects_zero_weight_max():
    with pytest.raises(ValueError):
        compute_beta(np.ones((1, 2), dtype=np.float32), [0.0], [1])


def test_momentum_single_step_hand_value():
    st = ScalingState(s=np.array([3.0], dtype=np.float32), gamma=0.2)
    momentum_update(st, np.array([5.0], dtype=np.float32))
    assert st.s[0] == np.float32(0.2 * 3.0 + 0.8 * 5.0)  # 4.6 exactly
    assert st.step == 1


def test_momentum_gamma_boundaries():
    s0 = np.array([2.0, 7.0], dtype=np.float32)
    frozen = momentum_update(ScalingState(s=s0.copy(), gamma=1.0), [9.0, 9.0])
    np.testing.assert_array_equal(frozen.s, s0)
    memoryless = momentum_update(ScalingState(s=s0.copy(), gamma=0.0), [9.0, 4.0])
    np.testing.assert_array_equal(memoryless.s, [9.0, 4.0])


def test_momentum_keeps_off_outlier_channels_at_one():
    st = ScalingState(s=np.array([1.0, 4.0, 1.0], dtype=np.float32), gamma=0.3)
    for _ in range(20):
        momentum_update(st, [1.0, 2.5, 1.0])
    assert st.s[0] == 1.0 and st.s[2] == 1.0
    assert st.step == 20


def test_momentum_is_convex_combination():
    rng = np.random.default_rng(0)
    st = ScalingState(s=np.ones(8, dtype=np.float32) * 3, gamma=0.2)
    for _ in range(10):
        beta = (1 + 5 * rng.random(8)).astype(np.float32)
        lo = np.minimum(st.s, beta)
        hi = np.maximum(st.s, beta)
        momentum_update(st, beta)
        assert np.all(st.s >= lo - 1e-6) and np.all(st.s <= hi + 1e-6)


def test_momentum_closed_form():
    s0 = np.array([1.0, 3.0, 1.0], dtype=np.float32)
    beta = np.array([1.0, 5.0, 1.0], dtype=np.float32)
    gamma = 0.2
    st = ScalingState(s=s0.copy(), gamma=gamma)
    T = 10
    for _ in range(T):
        momentum_update(st, beta)
    expect = gamma**T * s0 + (1 - gamma**T) * beta
    np.testing.assert_allclose(st.s, expect, atol=1e-6)


def test_state_validates_gamma():
    with pytest.raises(ValueError):
        ScalingState(s=np.ones(2, dtype=np.float32), gamma=1.5)


def test_beta_from_maxima_matches_compute_beta():
    X = np.abs(random_matrix(5, 6, seed=3)) * 8
    direct = compute_beta(X, [0.7, 0.9], [2, 4])
    via_max = beta_from_maxima(np.abs(X).max(axis=0), [0.7, 0.9], [2, 4], 6)
    np.testing.assert_allclose(direct, via_max, rtol=1e-6)


# --- smoothing factors ---


def test_smooth_factors_hand_example():
    s = smooth_factors([4.0, 1.0], [1.0, 4.0], alpha=0.5)
    np.testing.assert_allclose(s, [2.0, 0.5], rtol=1e-6)


def test_smooth_factors_alpha_boundaries():
    x = [4.0, 9.0]
    w = [2.0, 3.0]
    np.testing.assert_allclose(smooth_factors(x, w, alpha=0.0), [0.5, 1.0 / 3.0], rtol=1e-6)
    np.testing.assert_allclose(smooth_factors(x, w, alpha=1.0), [4.0, 9.0], rtol=1e-6)


def test_smooth_factors_equal_maxima_give_ones():
    v = [0.5, 2.0, 7.0]
    np.testing.assert_allclose(smooth_factors(v, v, 0.5), [1.0, 1.0, 1.0], rtol=1e-6)


def test_smooth_factors_zero_inputs_floored():
    s = smooth_factors([0.0, 1.0], [1.0, 0.0], alpha=0.5)
    assert np.all(s > 0)
    assert s[0] >= 1e-5  # output floor
    with pytest.raises(ValueError):
        smooth_factors([1.0], [1.0], alpha=2.0)


# --- pearson similarity ---


def test_pearson_identical_vectors():
    a = np.array([1.0, 5.0, 2.0, 9.0])
    assert pearson_similarity(a, a.copy()) == pytest.approx(1.0)


def test_pearson_anti_linear():
    a = np.array([1.0, 5.0, 2.0, 9.0])
    assert pearson_similarity(a, -a + 3.0) == pytest.approx(-1.0)


def test_pearson_exact_linearity():
    assert pearson_similarity([1.0, 2.0, 3.0], [2.0, 4.0, 6.0], top_frac=1.0) == pytest.approx(1.0)


def test_pearson_constant_vector_is_zero():
    assert pearson_similarity([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == 0.0


def test_pearson_top_fraction_filters_by_first_vector():
    # top half of a is indices 3 and 1; b agrees there, disagrees elsewhere
    a = np.array([0.1, 5.0, 0.2, 9.0])
    b = np.array([-7.0, 5.0, 44.0, 9.0])
    assert pearson_similarity(a, b, top_frac=0.5) == pytest.approx(1.0)


def test_pearson_filter_too_small_errors():
    with pytest.raises(ValueError):
        pearson_similarity(np.ones(100), np.ones(100), top_frac=0.001)


def test_pearson_top_fraction_uses_ceiling():
    # 1% of 128 channels -> ceil(1.28) = 2 kept, enough to correlate
    a = np.zeros(128)
    a[7], a[99] = 10.0, 8.0
    b = np.zeros(128)
    b[7], b[99] = 3.0, 1.0
    assert pearson_similarity(a, b, top_frac=0.01) == pytest.approx(1.0)
