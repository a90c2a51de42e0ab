"""Dense float64 helpers shared by every other module.

Matrices are plain 2-D ``np.ndarray`` objects of dtype float64. Public helpers
reject shape mismatches and non-finite results instead of propagating them.
"""
from functools import lru_cache

import numpy as np


def as_matrix(a) -> np.ndarray:
    """Return ``a`` as a 2-D float64 array, promoting vectors to a single row."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"Expected a 2-D matrix, got an array with {arr.ndim} dimensions.")
    return arr


def check_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"The {name} contains NaN or Inf entries.")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Standard matrix product with an explicit shape check.

    Args:
        a (np.ndarray): left operand of shape (n, k).
        b (np.ndarray): right operand of shape (k, m).

    Returns:
        np.ndarray: the (n, m) product.

    Raises:
        ValueError: if ``a.cols != b.rows``.

    Example:
        >>> matmul([[1, 2], [3, 4]], [[0], [1]])
        array([[2.],
               [4.]])
    """
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"Incompatible shapes for matmul: {a.shape} x {b.shape}."
        )
    return check_finite(a @ b, "matrix product")


def frob_norm_sq(a: np.ndarray) -> float:
    """Sum of squared entries."""
    arr = np.asarray(a, dtype=np.float64)
    return float(np.vdot(arr, arr).real)


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def is_power_of_two(n: int) -> bool:
    return isinstance(n, (int, np.integer)) and n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _sylvester(n: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    h = h / np.sqrt(n)
    h.setflags(write=False)
    return h


def hadamard(n: int) -> np.ndarray:
    """
    Orthonormal Walsh-Hadamard matrix of order ``n`` built by Sylvester recursion.

    Args:
        n (int): matrix order, a power of two.

    Returns:
        np.ndarray: read-only (n, n) matrix H with H @ H.T == I.

    Raises:
        ValueError: if ``n`` is not a power of two.
    """
    if not is_power_of_two(n):
        raise ValueError(f"Hadamard order must be a power of two, got {n}.")
    return _sylvester(int(n))
