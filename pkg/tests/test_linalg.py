import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ordlab.linalg import as_matrix, frob_norm_sq, hadamard, is_power_of_two, matmul, relu


def test_matmul():
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), np.array([[2.0], [4.0]]))
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_as_matrix():
    assert as_matrix([1, 2, 3]).shape == (1, 3)
    with pytest.raises(ValueError):
        as_matrix(np.ones((2, 2, 2)))


def test_frob_norm_sq():
    assert frob_norm_sq(np.array([[3.0, 4.0]])) == 25.0
    assert frob_norm_sq(np.zeros((3, 3))) == 0.0


def test_relu():
    assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), np.array([0.0, 0.0, 2.0]))


@pytest.mark.parametrize("n, expected", [(1, True), (2, True), (8, True), (6, False), (0, False), (12, False)])
def test_is_power_of_two(n, expected):
    assert is_power_of_two(n) == expected


@settings(max_examples=10, deadline=None)
@given(st.integers(min_value=0, max_value=7))
def test_hadamard_is_orthonormal(k):
    h = hadamard(2**k)
    assert np.allclose(h @ h.T, np.eye(2**k), atol=1e-12)


def test_hadamard_rejects_other_orders():
    with pytest.raises(ValueError):
        hadamard(6)


def test_hadamard_is_read_only():
    with pytest.raises(ValueError):
        hadamard(4)[0, 0] = 1.0
