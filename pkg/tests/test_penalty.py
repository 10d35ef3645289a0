import numpy as np
import pytest

from errors import ConfigError
from penalty import (L1, ZERO_LOCK, PenaltySpec, default_zero_threshold, lqa_weight, lqa_weights,
                     penalty_gradient, penalty_prime)


@pytest.fixture
def scad():
    return PenaltySpec(lam=1.0, a=3.7)


@pytest.mark.parametrize("gamma, expected", [
    (0.5, 1.0),
    (0.0, 0.0),
    (1.0, 1.0),
    (2.0, 1.7 / 2.7),
    (3.7, 0.0),
    (5.0, 0.0),
])
def test_scad_derivative_values(scad, gamma, expected):
    assert penalty_prime(gamma, scad) == pytest.approx(expected, abs=1e-12)


def test_scad_derivative_is_odd_and_bounded(scad):
    g = np.linspace(-6, 6, 241)
    values = penalty_prime(g, scad)
    np.testing.assert_allclose(values, -penalty_prime(-g, scad), atol=1e-15)
    assert np.all(np.abs(values) <= scad.lam + 1e-15)


def test_scad_derivative_is_continuous_at_lambda(scad):
    assert penalty_prime(1.0 - 1e-9, scad) == pytest.approx(penalty_prime(1.0 + 1e-9, scad), abs=1e-8)


def test_l1_derivative():
    spec = PenaltySpec(family=L1, lam=0.3)
    np.testing.assert_allclose(penalty_prime(np.array([-2.0, 0.0, 0.1]), spec), [-0.3, 0.0, 0.3])


def test_zero_lambda_gives_zero_derivative():
    np.testing.assert_array_equal(penalty_gradient([0.5, -2.0, 10.0], PenaltySpec(lam=0.0)), np.zeros(3))


def test_gradient_vector_and_mask(scad):
    np.testing.assert_allclose(penalty_gradient([0.5, 2.0], scad), [1.0, 0.629630], atol=1e-6)
    np.testing.assert_allclose(penalty_gradient([0.5, 2.0], scad, unpenalized_mask=(0,)), [0.0, 0.629630], atol=1e-6)


def test_gradient_mask_out_of_range(scad):
    with pytest.raises(IndexError):
        penalty_gradient([0.5, 2.0], scad, unpenalized_mask=(2,))


def test_lqa_weight(scad):
    assert lqa_weight(0.5, scad, 1e-6) == pytest.approx(2.0)
    assert lqa_weight(4.0, scad, 1e-6) == 0.0
    assert lqa_weight(-0.5, scad, 1e-6) == pytest.approx(2.0)


def test_lqa_weight_locks_small_coefficients(scad):
    assert lqa_weight(1e-9, scad, 1e-6) is ZERO_LOCK
    assert repr(ZERO_LOCK) == "ZERO_LOCK"


def test_lqa_weight_rejects_bad_threshold(scad):
    with pytest.raises(ConfigError):
        lqa_weight(0.5, scad, 0.0)


def test_lqa_weights_vectorized(scad):
    weights, locked = lqa_weights([0.5, 1e-9, 4.0, 1e-9], scad, 1e-6, unpenalized_mask=(3,))
    np.testing.assert_allclose(weights, [2.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(locked, [False, True, False, False])


def test_default_zero_threshold():
    assert default_zero_threshold([0.1, -0.2]) == pytest.approx(1e-6)
    assert default_zero_threshold([3.0, -5.0]) == pytest.approx(5e-6)


@pytest.mark.parametrize("kwargs", [
    {"family": "MCP"},
    {"lam": -0.1},
    {"lam": float("nan")},
    {"a": 2.0},
])
def test_invalid_penalty_spec(kwargs):
    with pytest.raises(ConfigError):
        PenaltySpec(**kwargs)


def test_family_is_case_insensitive():
    assert PenaltySpec(family="scad").family == "SCAD"
    assert PenaltySpec(lam=0.2).with_lambda(0.7).lam == 0.7
