import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chanorm.numerics import (
    KernelError,
    NonPSDError,
    cosine_rows,
    cosine_rows_backward,
    logdet_psd,
    make_rng,
    matmul,
    rowwise_softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_small_cases():
    assert np.array_equal(matmul(np.eye(2), [[1, 2], [3, 4]]), [[1, 2], [3, 4]])
    assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b), ref, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(KernelError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative(rng):
    a, b, c, d = (rng.normal(size=(4, 4)) for _ in range(4))
    np.testing.assert_allclose(matmul(matmul(matmul(a, b), c), d), matmul(a, matmul(b, matmul(c, d))), atol=1e-10)


def test_softmax_examples():
    np.testing.assert_allclose(rowwise_softmax([[0.0, 0.0, 0.0]], 1.0), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(rowwise_softmax([[1.0, 0.0]], 1.0), [[0.7310585786300049, 0.2689414213699951]],
                               atol=1e-15)
    cold = rowwise_softmax([[1.0, 0.0]], 0.05)
    assert cold[0, 0] > 0.9999


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_bad_tau(tau):
    with pytest.raises(KernelError):
        rowwise_softmax([[1.0, 2.0]], tau)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(1e-3, 10), finite)
def test_softmax_rows_sum_to_one_and_shift_invariant(m, tau, shift):
    w = rowwise_softmax(m, tau)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w >= 0)
    np.testing.assert_allclose(rowwise_softmax(m + shift, tau), w, atol=1e-12)


def test_logdet_examples():
    assert logdet_psd(np.eye(3)) == 0.0
    assert logdet_psd(np.diag([2.0, 3.0])) == pytest.approx(math.log(6), abs=1e-14)


@pytest.mark.parametrize("c", [0.5, 1.0, 4.0])
def test_logdet_scaled_identity(c):
    assert logdet_psd(c * np.eye(5)) == pytest.approx(5 * math.log(c), abs=1e-12)


def test_logdet_matches_eigenvalues(rng):
    a = rng.normal(size=(6, 6))
    m = a.T @ a + np.eye(6)
    assert logdet_psd(m) == pytest.approx(np.log(np.linalg.eigvalsh(m)).sum(), abs=1e-9)


def test_logdet_reports_failing_pivot():
    m = np.diag([1.0, 2.0, -1.0])
    with pytest.raises(NonPSDError) as info:
        logdet_psd(m)
    assert info.value.pivot == 2


def test_cosine_examples():
    v = np.array([[3.0, 4.0]])
    assert cosine_rows(v, v, 0.0)[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert cosine_rows([[1.0, 0.0]], [[0.0, 1.0]], 0.0)[0, 0] == 0.0
    out = cosine_rows(np.random.default_rng(0).normal(size=(3, 2)), np.zeros((1, 2)), 1e-8)
    assert np.all(out == 0.0)


def test_cosine_backward_finite_difference(rng):
    a, b, g = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 3, 5))
    ga, gb = cosine_rows_backward(a, b, g)
    for arr, grad in ((a, ga), (b, gb)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + 1e-6
            fp = (cosine_rows(a, b) * g).sum()
            arr[idx] = old - 1e-6
            fm = (cosine_rows(a, b) * g).sum()
            arr[idx] = old
            assert grad[idx] == pytest.approx((fp - fm) / 2e-6, rel=1e-5, abs=1e-8)


def test_rng_streams_are_reproducible_and_distinct():
    a = make_rng(7, 1).normal(size=5)
    assert np.array_equal(a, make_rng(7, 1).normal(size=5))
    assert not np.array_equal(a, make_rng(7, 2).normal(size=5))
