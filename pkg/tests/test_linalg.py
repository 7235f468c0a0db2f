import numpy as np
import pytest

from capsrec.errors import DimensionError, DomainError
from capsrec.linalg import (add, dot, identity, l2_norm, matmul, mul, scale,
                            softmax, softmax_backward, softmax_rows, sub,
                            transpose)


def test_identity_times_vector():
    v = np.array([1.5, -2.0, 3.25])
    assert np.array_equal(matmul(identity(3), v), v)


def test_dot_example():
    assert dot(np.array([1.0, 2.0]), np.array([3.0, 1.0])) == 5.0


def test_norm_pythagorean():
    assert l2_norm(np.array([3.0, 4.0])) == 5.0


def test_elementwise_and_scale():
    a = np.array([1.0, 2.0])
    b = np.array([10.0, 20.0])
    assert np.array_equal(add(a, b), [11.0, 22.0])
    assert np.array_equal(sub(b, a), [9.0, 18.0])
    assert np.array_equal(mul(a, b), [10.0, 40.0])
    assert np.array_equal(scale(a, 3.0), [3.0, 6.0])
    assert np.array_equal(transpose(np.array([[1.0, 2.0]])), [[1.0], [2.0]])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert "(2, 3)" in str(err.value)
    with pytest.raises(DimensionError):
        add(np.ones(2), np.ones(3))
    with pytest.raises(DimensionError):
        dot(np.ones(2), np.ones(3))


def test_kernels_are_pure():
    a = np.arange(6, dtype=float).reshape(2, 3)
    b = np.arange(12, dtype=float).reshape(3, 4)
    first = matmul(a, b)
    second = matmul(a, b)
    assert np.array_equal(first, second)
    assert np.array_equal(a, np.arange(6, dtype=float).reshape(2, 3))


def test_softmax_symmetry():
    assert np.allclose(softmax(np.zeros(3)), np.full(3, 1.0 / 3.0), atol=1e-15)


def test_softmax_closed_form():
    out = softmax(np.array([0.0, np.log(3.0)]))
    assert np.allclose(out, [0.25, 0.75], atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.normal(size=rng.integers(1, 9))
        c = rng.normal() * 10
        assert np.allclose(softmax(v + c), softmax(v), atol=1e-12)


def test_softmax_sums_to_one_large_inputs():
    rng = np.random.default_rng(1)
    for n in (1, 2, 17, 1000, 10_000):
        v = rng.normal(scale=50.0, size=n)
        out = softmax(v)
        assert np.all(out > 0)
        assert abs(out.sum() - 1.0) <= 1e-12


def test_softmax_empty_is_domain_error():
    with pytest.raises(DomainError):
        softmax(np.array([]))


def test_softmax_rows_matches_per_row():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(5, 4))
    rows = softmax_rows(m)
    for i in range(5):
        assert np.allclose(rows[i], softmax(m[i]), atol=1e-15)


def test_softmax_backward_against_finite_difference():
    rng = np.random.default_rng(3)
    v = rng.normal(size=6)
    d_out = rng.normal(size=6)
    p = softmax(v)
    analytic = softmax_backward(p, d_out)
    eps = 1e-6
    numeric = np.empty_like(v)
    for i in range(v.size):
        up = v.copy()
        down = v.copy()
        up[i] += eps
        down[i] -= eps
        numeric[i] = (softmax(up) @ d_out - softmax(down) @ d_out) / (2 * eps)
    assert np.allclose(analytic, numeric, atol=1e-8)


def test_softmax_backward_output_sums_to_zero():
    rng = np.random.default_rng(4)
    p = softmax(rng.normal(size=8))
    d = softmax_backward(p, rng.normal(size=8))
    assert abs(d.sum()) < 1e-12
