"""Kernel tests: frozen analytic values, oracle sweeps, then properties."""

import math

import numpy as np
import pytest

from htdc.errors import ConfigurationError
from htdc.numerics import (
    NEG_INF,
    as_score_vector,
    cosine_distance,
    ema_update,
    log_softmax,
    log_sum_exp,
    sigmoid,
    softmax_tempered,
)

from oracles import (
    cosine_distance_oracle,
    log_softmax_oracle,
    lse_oracle,
    sigmoid_oracle,
    softmax_oracle,
)

LN2 = 0.6931471805599453
SIGMOID_1 = 0.7310585786300049  # 1 / (1 + e^-1), frozen from the oracle


def test_lse_singleton_identity():
    assert log_sum_exp([-0.5]) == -0.5


def test_lse_two_equal_zeros_is_ln2():
    assert log_sum_exp([0.0, 0.0]) == LN2


def test_lse_matches_oracle_on_random_vectors():
    rng = np.random.default_rng(11)
    for _ in range(300):
        v = rng.uniform(-20.0, 0.0, size=10)
        assert log_sum_exp(v) == pytest.approx(lse_oracle(v), abs=1e-12)


def test_lse_all_neg_inf_is_neg_inf():
    assert log_sum_exp([NEG_INF, NEG_INF]) == NEG_INF


def test_lse_ignores_neg_inf_entries():
    v = [NEG_INF, -1.0, NEG_INF, 0.5]
    assert log_sum_exp(v) == pytest.approx(lse_oracle(v), abs=1e-12)


def test_lse_stable_far_from_zero():
    # Unshifted exp would overflow/underflow; the value is max + lse(rest).
    assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000.0 + LN2, abs=1e-12)
    assert log_sum_exp([-1000.0, -1000.0]) == pytest.approx(-1000.0 + LN2, abs=1e-12)


def test_lse_dominates_max():
    rng = np.random.default_rng(12)
    for _ in range(200):
        v = rng.normal(0.0, 5.0, size=rng.integers(1, 12))
        assert log_sum_exp(v) >= np.max(v)


def test_lse_empty_raises():
    with pytest.raises(ValueError, match="empty"):
        log_sum_exp([])


def test_as_score_vector_rejects_nan_posinf_and_2d():
    with pytest.raises(ValueError, match="NaN"):
        as_score_vector([0.0, float("nan")])
    with pytest.raises(ValueError, match=r"\+inf"):
        as_score_vector([0.0, float("inf")])
    with pytest.raises(ValueError, match="one-dimensional"):
        as_score_vector([[0.0], [1.0]])


def test_softmax_uniform_logits():
    out = softmax_tempered([1.0, 1.0, 1.0], 1.0)
    assert np.all(out == 1.0 / 3.0)


def test_softmax_two_equal_any_temperature():
    for a in (-3.0, 0.0, 7.5):
        for t in (0.5, 1.0, 4.0):
            assert np.all(softmax_tempered([a, a], t) == 0.5)


def test_softmax_temperature_two_logits_frozen():
    # [2, 0] at temperature 2 scales to [1, 0]: exp(1)/(exp(1)+1) and its
    # complement.
    out = softmax_tempered([2.0, 0.0], 2.0)
    expected = softmax_oracle([2.0, 0.0], 2.0)
    assert out[0] == pytest.approx(0.7310585786300049, abs=1e-15)
    assert out[1] == pytest.approx(0.2689414213699951, abs=1e-15)
    assert out == pytest.approx(expected, abs=1e-15)


def test_softmax_matches_oracle_on_random_vectors():
    rng = np.random.default_rng(13)
    for _ in range(200):
        v = rng.normal(0.0, 4.0, size=rng.integers(2, 16))
        t = float(rng.uniform(0.2, 3.0))
        assert softmax_tempered(v, t) == pytest.approx(softmax_oracle(v, t), abs=1e-12)


def test_softmax_sums_to_one_and_nonnegative():
    rng = np.random.default_rng(14)
    for _ in range(200):
        v = rng.normal(0.0, 10.0, size=8)
        out = softmax_tempered(v, 1.0)
        assert np.all(out >= 0.0)
        assert math.fsum(out) == pytest.approx(1.0, abs=1e-12)


def test_softmax_neg_inf_masks_to_exact_zero():
    out = softmax_tempered([0.0, NEG_INF, 1.0], 1.0)
    assert out[1] == 0.0


def test_softmax_rejects_bad_temperature():
    with pytest.raises(ConfigurationError):
        softmax_tempered([1.0, 2.0], 0.0)
    with pytest.raises(ConfigurationError):
        softmax_tempered([1.0, 2.0], -1.0)


def test_softmax_all_masked_raises():
    with pytest.raises(ValueError):
        softmax_tempered([NEG_INF, NEG_INF], 1.0)


def test_log_softmax_two_zeros():
    out = log_softmax([0.0, 0.0])
    assert np.all(out == -LN2)


def test_log_softmax_mask_passthrough():
    out = log_softmax([NEG_INF, 0.0])
    assert out[0] == NEG_INF
    assert out[1] == 0.0


def test_log_softmax_matches_oracle():
    rng = np.random.default_rng(15)
    for _ in range(200):
        v = rng.normal(0.0, 4.0, size=20)
        assert log_softmax(v) == pytest.approx(log_softmax_oracle(v), abs=1e-12)


def test_cosine_distance_aligned_and_opposed():
    rng = np.random.default_rng(16)
    for _ in range(50):
        v = rng.normal(size=6)
        assert cosine_distance(v, v) == pytest.approx(0.0, abs=1e-12)
        assert cosine_distance(v, 2.5 * v) == pytest.approx(0.0, abs=1e-12)
        assert cosine_distance(v, -v) == pytest.approx(2.0, abs=1e-12)


def test_cosine_distance_orthogonal_is_one():
    assert cosine_distance([1.0, 0.0], [0.0, 3.0]) == 1.0


def test_cosine_distance_zero_norm_convention():
    assert cosine_distance([0.0, 0.0], [1.0, 2.0]) == 0.0
    assert cosine_distance([1e-13, 0.0], [1.0, 2.0]) == 0.0


def test_cosine_distance_matches_oracle():
    rng = np.random.default_rng(17)
    for _ in range(300):
        a = rng.normal(size=8)
        b = rng.normal(size=8)
        assert cosine_distance(a, b) == pytest.approx(
            cosine_distance_oracle(a, b), abs=1e-12
        )


def test_cosine_distance_shape_mismatch_raises():
    with pytest.raises(ValueError):
        cosine_distance([1.0, 2.0], [1.0, 2.0, 3.0])


def test_sigmoid_center():
    assert sigmoid(0.0) == 0.5


def test_sigmoid_symmetry():
    for x in (0.5, 1.0, 3.0, 17.0):
        assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0, abs=1e-15)


def test_sigmoid_one_frozen():
    assert sigmoid(1.0) == pytest.approx(SIGMOID_1, abs=1e-15)
    assert sigmoid(1.0) == pytest.approx(sigmoid_oracle(1.0), abs=1e-12)


def test_sigmoid_matches_oracle_and_is_monotone():
    rng = np.random.default_rng(18)
    xs = np.sort(rng.normal(0.0, 10.0, size=200))
    prev = -1.0
    for x in xs:
        y = sigmoid(float(x))
        assert y == pytest.approx(sigmoid_oracle(x), abs=1e-12)
        assert y >= prev
        prev = y


def test_sigmoid_saturates_cleanly():
    assert sigmoid(1000.0) == 1.0
    assert sigmoid(-1000.0) == 0.0


def test_ema_fixed_point():
    v = np.array([0.3, -0.7, 2.0])
    assert np.array_equal(ema_update(v, v, 0.6), v)


def test_ema_alpha_zero_is_current():
    prev = np.array([1.0, 1.0])
    cur = np.array([-2.0, 3.0])
    assert np.array_equal(ema_update(prev, cur, 0.0), cur)


def test_ema_midpoint():
    out = ema_update(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.5)
    assert np.array_equal(out, np.array([0.5, 0.5]))


def test_ema_rejects_alpha_outside_range():
    v = np.zeros(2)
    with pytest.raises(ConfigurationError):
        ema_update(v, v, 1.0)
    with pytest.raises(ConfigurationError):
        ema_update(v, v, -0.1)


def test_ema_stays_within_componentwise_bounds():
    rng = np.random.default_rng(19)
    for _ in range(200):
        prev = rng.normal(size=5)
        cur = rng.normal(size=5)
        alpha = float(rng.uniform(0.0, 0.999))
        out = ema_update(prev, cur, alpha)
        lo = np.minimum(prev, cur) - 1e-12
        hi = np.maximum(prev, cur) + 1e-12
        assert np.all(out >= lo) and np.all(out <= hi)
