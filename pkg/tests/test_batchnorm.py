from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from disc.batchnorm import (
    BatchNormState,
    batch_statistics,
    bn_backward_eval,
    bn_forward_eval,
    bn_forward_train,
    bn_update_stats,
)
from disc.errors import ConfigError, DegenerateBatchError, ShapeError


def state_of(gamma, beta, mean, var, eps=1e-5, momentum=0.1):
    arr = lambda v: np.array(v, dtype=np.float64)
    return BatchNormState(arr(gamma), arr(beta), arr(mean), arr(var), eps, momentum)


def test_eval_identity_statistics():
    y = bn_forward_eval(np.full((1, 1, 1, 1), 2.0), BatchNormState.identity(1, np.float64))
    assert y.item() == pytest.approx(2.0 / math.sqrt(1.00001), abs=1e-12)


def test_eval_affine_arithmetic():
    y = bn_forward_eval(np.full((1, 1, 1, 1), 5.0), state_of([2.0], [1.0], [3.0], [4.0], eps=1e-12))
    assert y.item() == pytest.approx(3.0, abs=1e-9)


def test_eval_leaves_state_untouched(rng):
    s = state_of(rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), rng.random(3) + 0.1)
    before = [a.copy() for a in (s.gamma, s.beta, s.running_mean, s.running_var)]
    bn_forward_eval(rng.normal(size=(2, 3, 2, 2)), s)
    for a, b in zip(before, (s.gamma, s.beta, s.running_mean, s.running_var)):
        assert np.array_equal(a, b)


def test_channel_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        bn_forward_eval(np.zeros((2, 3, 2, 2)), BatchNormState.identity(2))
    with pytest.raises(ShapeError):
        bn_forward_train(np.zeros((2, 3, 2, 2)), BatchNormState.identity(2))


def test_frozen_two_point_batch():
    ref = oracles.FROZEN_TWO_POINT
    x = np.array(ref["x"]).reshape(2, 1, 1, 1)
    y, updated, mean, var = bn_forward_train(x, BatchNormState.identity(1, np.float64))
    assert mean.item() == ref["mean"]
    assert var.item() == ref["biased_var"]
    np.testing.assert_allclose(y.ravel(), ref["y"], atol=1e-12)
    assert updated.running_mean.item() == pytest.approx(ref["running_mean"], abs=1e-12)
    assert updated.running_var.item() == pytest.approx(ref["running_var"], abs=1e-12)


def test_constant_batch_maps_to_beta():
    s = state_of([2.0, 3.0], [0.5, -1.0], [0, 0], [1, 1])
    y, _, _, var = bn_forward_train(np.full((4, 2, 2, 2), 7.0), s)
    assert np.all(var == 0)
    assert np.allclose(y[:, 0], 0.5) and np.allclose(y[:, 1], -1.0)


def test_single_value_per_channel_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        bn_forward_train(np.ones((1, 2, 1, 1)), BatchNormState.identity(2))


def test_train_matches_summation_oracle(rng):
    x = rng.normal(2.0, 3.0, size=(3, 2, 4, 5))
    s = state_of(rng.normal(size=2), rng.normal(size=2), [0, 0], [1, 1])
    y, _, mean, var = bn_forward_train(x, s)
    y_ref, mean_ref, var_ref = oracles.bn_train(x, s.gamma, s.beta, s.eps)
    assert np.max(np.abs(mean - mean_ref)) < 1e-12
    assert np.max(np.abs(var - var_ref)) < 1e-12
    assert np.max(np.abs(y - y_ref)) < 1e-12


def test_update_arithmetic_and_endpoint():
    s = state_of([1], [0], [0.0], [1.0])
    assert bn_update_stats(s, np.array([1.0]), np.array([1.0]), 0.1).running_mean.item() == pytest.approx(0.1)
    full = bn_update_stats(s, np.array([4.5]), np.array([2.25]), 1.0)
    assert full.running_mean.item() == 4.5 and full.running_var.item() == 2.25


@pytest.mark.parametrize("rho", [0.0, -0.1, 1.5, float("nan")])
def test_update_rejects_bad_momentum(rho):
    s = BatchNormState.identity(2)
    with pytest.raises(ConfigError):
        bn_update_stats(s, np.zeros(2, np.float32), np.ones(2, np.float32), rho)


def test_update_converges_geometrically():
    s = state_of([1], [0], [0.0], [1.0])
    m, v, rho = 3.0, 0.5, 0.1
    for k in range(1, 40):
        s = bn_update_stats(s, np.array([m]), np.array([v]), rho)
        assert abs(s.running_mean.item() - m) == pytest.approx(abs(0.0 - m) * (1 - rho) ** k, rel=1e-9)
        assert abs(s.running_var.item() - v) == pytest.approx(abs(1.0 - v) * (1 - rho) ** k, rel=1e-9)


def test_running_var_uses_unbiased_estimate(rng):
    x = rng.normal(size=(2, 1, 1, 3))
    n = 6
    _, updated, _, var = bn_forward_train(x, BatchNormState.identity(1, np.float64, momentum=1.0))
    assert updated.running_var.item() == pytest.approx(var.item() * n / (n - 1), rel=1e-12)


def test_eval_train_consistency(rng):
    x = rng.normal(size=(4, 3, 3, 3))
    s = state_of(rng.normal(size=3), rng.normal(size=3), [0, 0, 0], [1, 1, 1])
    y_train, _, mean, var = bn_forward_train(x, s)
    # biased convention: plug the biased batch variance into the running slot
    y_eval = bn_forward_eval(x, state_of(s.gamma, s.beta, mean, var))
    np.testing.assert_allclose(y_eval, y_train, atol=1e-12)


def test_normalized_output_moments(rng):
    x = rng.normal(5.0, 2.0, size=(8, 4, 5, 5))
    y, *_ = bn_forward_train(x, BatchNormState.identity(4, np.float64))
    mean, var = batch_statistics(y)
    assert np.all(np.abs(mean) < 1e-5)
    assert np.all(np.abs(var - 1) < 1e-3)


def test_eval_backward_matches_scale(rng):
    x = rng.normal(size=(2, 2, 2, 2))
    s = state_of([2.0, 0.5], [0, 0], [0.1, -0.2], [4.0, 0.25])
    dy = rng.normal(size=x.shape)
    dx, dgamma, dbeta = bn_backward_eval(dy, s, x)
    np.testing.assert_allclose(dx[:, 0], dy[:, 0] * 2.0 / math.sqrt(4.0 + 1e-5))
    np.testing.assert_allclose(dbeta, dy.sum(axis=(0, 2, 3)))


def test_state_validation():
    with pytest.raises(ShapeError):
        state_of([1, 1], [0], [0, 0], [1, 1])
    with pytest.raises(ConfigError):
        state_of([1], [0], [0], [-1.0])
    with pytest.raises(ConfigError):
        state_of([1], [0], [0], [1.0], eps=0.0)


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(
    old_m=st.lists(finite, min_size=1, max_size=4),
    data=st.data(),
    rho=st.floats(1e-6, 1.0),
)
def test_update_is_convex_and_nonnegative(old_m, data, rho):
    c = len(old_m)
    new_m = data.draw(st.lists(finite, min_size=c, max_size=c))
    old_v = data.draw(st.lists(st.floats(0, 1e3), min_size=c, max_size=c))
    new_v = data.draw(st.lists(st.floats(0, 1e3), min_size=c, max_size=c))
    s = state_of([1] * c, [0] * c, old_m, old_v)
    out = bn_update_stats(s, np.array(new_m), np.array(new_v), rho)
    lo_m, hi_m = np.minimum(old_m, new_m), np.maximum(old_m, new_m)
    lo_v, hi_v = np.minimum(old_v, new_v), np.maximum(old_v, new_v)
    tol = 1e-9 * (1 + np.abs(hi_m))
    assert np.all(out.running_mean >= lo_m - tol) and np.all(out.running_mean <= hi_m + tol)
    assert np.all(out.running_var >= 0)
    assert np.all(out.running_var >= lo_v - 1e-9 * (1 + hi_v)) and np.all(out.running_var <= hi_v + 1e-9 * (1 + hi_v))
