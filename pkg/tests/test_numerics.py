import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokdiv.numerics import argmax_row, quantile, softmax_row


finite_rows = st.lists(
    st.floats(min_value=-50, max_value=50, allow_nan=False), min_size=2, max_size=12
)


def test_softmax_flat_row():
    out = softmax_row(np.array([[0.0, 0.0, 0.0, 0.0]]), 0)
    np.testing.assert_allclose(out, [0.25, 0.25, 0.25, 0.25], atol=1e-15)


def test_softmax_large_values_shift_invariant():
    out = softmax_row(np.array([[1000.0, 1000.0]]), 0)
    np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-15)


def test_softmax_hand_value():
    # exp(ln 1) = 1, exp(ln 3) = 3 -> [1/4, 3/4]
    out = softmax_row(np.array([[math.log(1.0), math.log(3.0)]]), 0)
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax_row(np.array([[np.nan, 1.0]]), 0)


@given(finite_rows)
def test_softmax_sums_to_one(row):
    out = softmax_row(np.array([row]), 0)
    assert abs(out.sum() - 1.0) <= 1e-12
    assert np.all(out >= 0)


@given(finite_rows, st.floats(min_value=-30, max_value=30, allow_nan=False))
def test_softmax_constant_shift_invariance(row, c):
    base = softmax_row(np.array([row]), 0)
    shifted = softmax_row(np.array([row]) + c, 0)
    np.testing.assert_allclose(base, shifted, atol=1e-12)


def test_argmax_basic():
    assert argmax_row(np.array([[1.0, 3.0, 2.0]]), 0) == 1


def test_argmax_tie_breaks_low():
    assert argmax_row(np.array([[5.0, 5.0, 1.0]]), 0) == 0


def test_argmax_empty_row_raises():
    with pytest.raises(ValueError):
        argmax_row(np.zeros((1, 0)), 0)


@given(st.permutations(list(range(6))))
def test_argmax_permutation_covariant(perm):
    values = np.array([10.0, 3.0, -2.0, 7.5, 0.0, 5.0])
    permuted = values[list(perm)]
    assert permuted[argmax_row(permuted[None, :], 0)] == values.max()


def test_quantile_lower_interpolation():
    assert quantile([1, 2, 3, 4], 0.75) == 3


def test_quantile_singleton():
    for q in (0.0, 0.3, 0.75, 1.0):
        assert quantile([7], q) == 7


def test_quantile_zero_is_min():
    assert quantile([0, 100], 0.0) == 0


def test_quantile_empty_raises():
    with pytest.raises(ValueError):
        quantile([], 0.5)


def test_quantile_out_of_range_raises():
    with pytest.raises(ValueError):
        quantile([1.0], 1.5)


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), min_size=1))
def test_quantile_extremes(values):
    assert quantile(values, 0.0) == min(values)
    assert quantile(values, 1.0) == max(values)
