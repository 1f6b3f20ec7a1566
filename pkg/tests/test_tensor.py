"""Tests for tensor primitives: elementwise ops, finiteness checks, RNG."""

import numpy as np
import numpy.testing as npt
import pytest

from rfcn.errors import NumericsError, ShapeError
from rfcn.tensor import (Rng, check_finite, elementwise, fill_random, matmul,
                         sigmoid)


def test_sigmoid_matches_naive_in_safe_range():
    rng = Rng(1)
    x = rng.uniform(-20, 20, 1000)
    npt.assert_allclose(sigmoid(x), 1.0 / (1.0 + np.exp(-x)), rtol=1e-12)


def test_sigmoid_stable_at_extremes():
    x = np.array([-1e4, -750.0, 750.0, 1e4])
    y = sigmoid(x)
    assert np.all(np.isfinite(y))
    npt.assert_allclose(y, [0.0, 0.0, 1.0, 1.0], atol=1e-12)


def test_check_finite_reports_op_and_index():
    x = np.array([1.0, 2.0, np.nan, 4.0])
    with pytest.raises(NumericsError) as e:
        check_finite(x, "myop")
    assert "myop" in str(e.value)
    assert "2" in str(e.value)


def test_elementwise_binary_and_bias_broadcast():
    rng = Rng(2)
    a = rng.uniform(-1, 1, (2, 3, 4, 4))
    b = rng.uniform(-1, 1, (2, 3, 4, 4))
    npt.assert_array_equal(elementwise("add", a, b), a + b)
    bias = rng.uniform(-1, 1, 3)
    npt.assert_array_equal(elementwise("add", a, bias),
                           a + bias.reshape(1, 3, 1, 1))
    chw = rng.uniform(-1, 1, (3, 4, 4))
    npt.assert_array_equal(elementwise("mul", chw, bias),
                           chw * bias.reshape(3, 1, 1))


def test_elementwise_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        elementwise("add", np.zeros((2, 3, 4, 4)), np.zeros(5))
    with pytest.raises(ShapeError):
        elementwise("relu", np.zeros(3), np.zeros(3))


def test_matmul_checks_rank_and_dims():
    with pytest.raises(ShapeError):
        matmul(np.zeros(3), np.zeros((3, 2)))
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    a = np.arange(6, dtype=float).reshape(2, 3)
    b = np.arange(12, dtype=float).reshape(3, 4)
    npt.assert_array_equal(matmul(a, b), a @ b)


def test_rng_determinism_and_split_independence():
    a = Rng(123).uniform(0, 1, 100)
    b = Rng(123).uniform(0, 1, 100)
    npt.assert_array_equal(a, b)
    # children are reproducible and differ from each other
    kids1 = [r.uniform(0, 1, 10) for r in Rng(7).split(3)]
    kids2 = [r.uniform(0, 1, 10) for r in Rng(7).split(3)]
    for k1, k2 in zip(kids1, kids2):
        npt.assert_array_equal(k1, k2)
    assert not np.array_equal(kids1[0], kids1[1])


def test_rng_permutation_and_choice_ranges():
    rng = Rng(5)
    for _ in range(20):
        p = rng.permutation(17)
        assert sorted(p) == list(range(17))
        c = rng.choice(9)
        assert 0 <= c < 9


def test_fill_random_scaled_fan_in_bounds():
    rng = Rng(11)
    w = fill_random((32, 5, 3, 3), rng, "scaled-fan-in", dtype=np.float64)
    bound = np.sqrt(6.0 / (5 * 3 * 3))
    assert np.abs(w).max() <= bound
    # large sample actually uses the range
    assert np.abs(w).max() > 0.8 * bound


def test_fill_random_uniform_range_and_dtype():
    rng = Rng(12)
    x = fill_random((1000,), rng, "uniform", lo=2.0, hi=3.0)
    assert x.dtype == np.float32
    assert x.min() >= 2.0 and x.max() < 3.0
