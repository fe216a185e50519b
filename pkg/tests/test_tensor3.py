import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pmuge.tensor3 import DegenerateNormError, ShapeError, Tensor3, axis_stats, inner_product, matmul3

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_rejects_wrong_rank_and_nonfinite():
    with pytest.raises(ShapeError):
        Tensor3(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        Tensor3(np.array([[[np.nan]]]))


def test_immutable_copy():
    a = np.ones((1, 2, 2))
    t = Tensor3(a)
    a[0, 0, 0] = 5.0
    assert t.data[0, 0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0, 0] = 2.0


def test_matmul_loop_oracle(rng):
    a, b = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 5, 2))
    ref = np.empty((4, 3, 2))
    for c in range(4):
        for i in range(3):
            for j in range(2):
                ref[c, i, j] = sum(a[c, i, k] * b[c, k, j] for k in range(5))
    np.testing.assert_allclose(matmul3(a, b).data, ref, rtol=1e-13, atol=1e-13)
    assert (Tensor3(a) @ Tensor3(b)) == matmul3(a, b)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul3(np.zeros((4, 3, 5)), np.zeros((4, 4, 2)))
    with pytest.raises(ShapeError):
        matmul3(np.zeros((4, 3, 5)), np.zeros((3, 5, 2)))


def test_transpose_swaps_last_axes(rng):
    a = rng.normal(size=(2, 3, 4))
    assert Tensor3(a).T.dims == (2, 4, 3)
    np.testing.assert_array_equal(Tensor3(a).T.T.data, a)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=finite), arrays(np.float64, (2, 3, 4), elements=finite))
def test_inner_product_symmetric(a, b):
    assert inner_product(a, b) == inner_product(b, a)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-10, 10)))
def test_cosine_bounds(a):
    if np.linalg.norm(a) < 1e-6:
        return
    assert inner_product(a, a, normalized=True) == pytest.approx(1.0, abs=1e-12)
    assert inner_product(a, -a, normalized=True) == pytest.approx(-1.0, abs=1e-12)


def test_cosine_of_zero_raises():
    with pytest.raises(DegenerateNormError):
        inner_product(np.zeros((1, 2, 2)), np.ones((1, 2, 2)), normalized=True)


def test_inner_product_shape_mismatch():
    with pytest.raises(ShapeError):
        inner_product(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


def test_axis_stats_matches_numpy(rng):
    x = rng.normal(size=(4, 7, 11))
    for ax in (1, 2):
        m, s = axis_stats(x, ax)
        np.testing.assert_allclose(m, x.mean(axis=ax), atol=1e-14)
        np.testing.assert_allclose(s, x.std(axis=ax), atol=1e-14)
    with pytest.raises(ValueError):
        axis_stats(x, 0)
