"""Dense 4-D NCHW float32 tensor and the handful of structural ops on it.

Tensors are immutable: the backing array is flagged read-only, so a tensor
can be handed to any number of readers without copying.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InvalidDimensionError, ShapeError

DTYPE = np.float32


class Tensor:
    __slots__ = ("_a",)

    def __init__(self, array, *, copy: bool = True):
        a = np.array(array, dtype=DTYPE, copy=copy, order="C")
        if a.ndim != 4:
            raise InvalidDimensionError(f"tensor must be 4-D (n,c,h,w), got shape {a.shape}")
        if min(a.shape) < 1:
            raise InvalidDimensionError(f"all dims must be >= 1, got {a.shape}")
        if not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        a.flags.writeable = False
        self._a = a

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt a freshly produced array without copying (caller gives up ownership)."""
        if array.dtype == DTYPE and array.flags.c_contiguous and array.ndim == 4:
            t = cls.__new__(cls)
            if min(array.shape) < 1:
                raise InvalidDimensionError(f"all dims must be >= 1, got {array.shape}")
            array.flags.writeable = False
            t._a = array
            return t
        return cls(array)

    @property
    def array(self) -> np.ndarray:
        return self._a

    @property
    def data(self) -> np.ndarray:
        """Flat row-major NCHW view of the elements."""
        return self._a.reshape(-1)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self._a.shape  # type: ignore[return-value]

    n = property(lambda self: self._a.shape[0])
    c = property(lambda self: self._a.shape[1])
    h = property(lambda self: self._a.shape[2])
    w = property(lambda self: self._a.shape[3])

    def __len__(self):
        return self._a.size

    def __array__(self, dtype=None, copy=None):
        if dtype is not None and dtype != DTYPE:
            return self._a.astype(dtype)
        return self._a

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def index(self, n: int, c: int, h: int, w: int) -> int:
        """Flat offset of coordinate (n, c, h, w)."""
        N, C, H, W = self.shape
        for v, lim in zip((n, c, h, w), (N, C, H, W)):
            if not 0 <= v < lim:
                raise IndexError(f"coordinate {(n, c, h, w)} out of range for {self.shape}")
        return ((n * C + c) * H + h) * W + w

    def coord(self, i: int) -> tuple[int, int, int, int]:
        """Inverse of :meth:`index`."""
        if not 0 <= i < self._a.size:
            raise IndexError(f"flat index {i} out of range for {self.shape}")
        N, C, H, W = self.shape
        i, w = divmod(i, W)
        i, h = divmod(i, H)
        n, c = divmod(i, C)
        return n, c, h, w

    def is_finite(self) -> bool:
        return bool(np.isfinite(self._a).all())

    def equal(self, other: "Tensor") -> bool:
        return self.shape == other.shape and bool(np.array_equal(self._a, other._a))


def new_filled(n: int, c: int, h: int, w: int, value: float) -> Tensor:
    if min(n, c, h, w) < 1:
        raise InvalidDimensionError(f"all dims must be >= 1, got {(n, c, h, w)}")
    return Tensor.wrap(np.full((n, c, h, w), value, dtype=DTYPE))


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shapes {a.shape} and {b.shape}")
    return Tensor.wrap(np.add(a.array, b.array))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.n, p.h, p.w) != (n, h, w):
            raise ShapeError(f"concat_channels: {p.shape} does not match n,h,w of {parts[0].shape}")
    if len(parts) == 1:
        return parts[0]
    return Tensor.wrap(np.concatenate([p.array for p in parts], axis=1))


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= t.c:
        raise ShapeError(f"channel slice [{start}:{stop}) invalid for {t.c} channels")
    return Tensor(t.array[:, start:stop])
