"""Dense tensor core: layer metadata, norms, group reductions, elementwise ops.

Weight tensors are plain float64 ``numpy`` arrays in row-major order.
Convolution weights are rank-4 ``(c_out, c_in, k_h, k_w)``; fully connected
weights are rank-2 ``(d_out, d_in)``. All operations here are deterministic
and return fresh arrays unless documented as in-place.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


class LayerKind(enum.Enum):
    CONV = "conv"
    FULLY_CONNECTED = "fc"


class GroupBy(enum.Enum):
    """Structured group reductions over a rank-4 weight tensor."""

    FILTER = "filter"            # one group per output filter
    CHANNEL = "channel"          # one group per input channel
    SHAPE_POSITION = "shape"     # one group per (channel, kh, kw) column


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one weight tensor."""

    name: str
    kind: LayerKind
    shape: tuple[int, ...]
    prunable: bool = False

    def __post_init__(self):
        if any(int(d) <= 0 for d in self.shape):
            raise ShapeError(f"layer {self.name}: non-positive dimension in {self.shape}")
        if self.kind is LayerKind.CONV and len(self.shape) != 4:
            raise ShapeError(f"conv layer {self.name} must be rank-4, got {self.shape}")
        if self.kind is LayerKind.FULLY_CONNECTED and len(self.shape) != 2:
            raise ShapeError(f"fc layer {self.name} must be rank-2, got {self.shape}")
        # Structured sparsity only applies to convolution weights.
        if self.prunable and self.kind is not LayerKind.CONV:
            raise ShapeError(f"layer {self.name}: only conv layers are prunable")

    @property
    def elements(self) -> int:
        return int(math.prod(self.shape))


def as_tensor(values, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, optionally checking the shape."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise ShapeError(f"expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def assert_finite(arr: np.ndarray, context: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{context}: non-finite entries detected")


def frobenius_norm(t: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.asarray(t, dtype=np.float64) ** 2)))


def group_norms(t: np.ndarray, group: GroupBy) -> np.ndarray:
    """Per-group Frobenius norms of a rank-4 tensor.

    ``FILTER`` reduces over (c_in, kh, kw) leaving ``c_out`` values,
    ``CHANNEL`` over (c_out, kh, kw) leaving ``c_in`` values, and
    ``SHAPE_POSITION`` over ``c_out`` leaving ``c_in * kh * kw`` values in
    row-major (channel, kh, kw) order.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 4:
        raise ShapeError(f"group norms need a rank-4 tensor, got rank {t.ndim}")
    sq = t * t
    if group is GroupBy.FILTER:
        return np.sqrt(sq.sum(axis=(1, 2, 3)))
    if group is GroupBy.CHANNEL:
        return np.sqrt(sq.sum(axis=(0, 2, 3)))
    if group is GroupBy.SHAPE_POSITION:
        return np.sqrt(sq.sum(axis=0)).ravel()
    raise ValueError(f"unknown group kind {group!r}")


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_same_shape(x, y)
    return x + y


def scale(x: np.ndarray, alpha: float) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * float(alpha)


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """alpha * x + y with exact shape matching."""
    _check_same_shape(x, y)
    return float(alpha) * x + y


def hadamard(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _check_same_shape(x, y)
    return x * y
