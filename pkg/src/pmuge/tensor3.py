"""Three-axis tensors and the per-channel matrix product.

Axis 0 is the datatype/channel axis (P=0, Q=1, V=2, F=3 for event data).
A product of two tensors holds each channel index fixed and multiplies the
remaining matrices, the same convention as ``numpy.matmul`` on 3-D arrays.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class DegenerateNormError(ValueError):
    pass


class Tensor3:
    """Immutable dense float64 tensor with exactly three axes."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise ShapeError(f"Tensor3 needs 3 axes, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor3 entries must be finite")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def zeros(cls, d0: int, d1: int, d2: int) -> "Tensor3":
        return cls(np.zeros((d0, d1, d2)))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dims(self) -> tuple[int, int, int]:
        return self._data.shape  # type: ignore[return-value]

    @property
    def T(self) -> "Tensor3":
        """Swap the last two axes of every channel."""
        return Tensor3(np.swapaxes(self._data, 1, 2))

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __matmul__(self, other: "Tensor3") -> "Tensor3":
        return matmul3(self, other)

    def __eq__(self, other):
        if not isinstance(other, Tensor3):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self._data, other._data))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self):
        return f"Tensor3(dims={self.dims})"


def _as3(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"expected a 3-axis tensor, got shape {arr.shape}")
    return arr


def matmul3(a, b) -> Tensor3:
    """Per-channel matrix product: ``out[c] = a[c] @ b[c]``."""
    A, B = _as3(a), _as3(b)
    if A.shape[0] != B.shape[0] or A.shape[2] != B.shape[1]:
        raise ShapeError(f"cannot multiply shapes {A.shape} and {B.shape}")
    return Tensor3(np.matmul(A, B))


def inner_product(a, b, normalized: bool = False) -> float:
    """Full tensor inner product; with ``normalized`` the cosine similarity."""
    A, B = _as3(a), _as3(b)
    if A.shape != B.shape:
        raise ShapeError(f"inner product needs equal shapes, got {A.shape} and {B.shape}")
    # ravel + dot keeps the sum order independent of argument order
    value = float(np.dot(A.ravel(), B.ravel()))
    if not normalized:
        return value
    na, nb = np.linalg.norm(A.ravel()), np.linalg.norm(B.ravel())
    if na == 0.0 or nb == 0.0:
        raise DegenerateNormError("normalized inner product of a zero-norm tensor")
    return float(np.clip(value / (na * nb), -1.0, 1.0))


def axis_stats(x, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population standard deviation along axis 1 or 2."""
    if axis not in (1, 2):
        raise ValueError(f"axis must be 1 or 2, got {axis}")
    X = _as3(x)
    mean = X.mean(axis=axis)
    std = np.sqrt(np.mean((X - np.expand_dims(mean, axis)) ** 2, axis=axis))
    return mean, std
