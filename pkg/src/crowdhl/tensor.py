"""Dense real tensors.

Tensors are plain C-ordered numpy arrays (row-major, last axis fastest).
Cuboids use the axis order (channel, height, width, time). float32 is the
working precision; float64 is used for finite-difference gradient checks.

The helpers here enforce the package's strict shape rules: no broadcasting,
no implicit padding, and loud errors instead of silent clipping.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import BoundsError, ShapeError

FLOAT32 = np.float32
FLOAT64 = np.float64

WIDTH_AXIS = 2


def dtype_for(precision: str) -> np.dtype:
    if precision == "f32":
        return np.dtype(FLOAT32)
    if precision == "f64":
        return np.dtype(FLOAT64)
    raise ValueError(f"unknown precision {precision!r}; expected 'f32' or 'f64'")


def tensor(data, dtype=FLOAT32) -> np.ndarray:
    """Build a contiguous tensor, rejecting empty extents."""
    t = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if t.ndim and min(t.shape) < 1:
        raise ShapeError(f"all extents must be >= 1, got {t.shape}")
    return t


def zeros(shape: Sequence[int], dtype=FLOAT32) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return np.zeros(shape, dtype=dtype)


def strides_of(shape: Sequence[int]) -> tuple[int, ...]:
    """Row-major element strides for ``shape``."""
    out = []
    acc = 1
    for extent in reversed(shape):
        out.append(acc)
        acc *= int(extent)
    return tuple(reversed(out))


def flat_offset(shape: Sequence[int], index: Sequence[int]) -> int:
    if len(index) != len(shape):
        raise ShapeError(f"index rank {len(index)} != tensor rank {len(shape)}")
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise BoundsError(f"index {tuple(index)} outside shape {tuple(shape)}")
    return sum(i * s for i, s in zip(index, strides_of(shape)))


def reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    new_shape = tuple(int(s) for s in new_shape)
    if any(s < 1 for s in new_shape):
        raise ShapeError(f"all extents must be >= 1, got {new_shape}")
    if math.prod(new_shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def flip_width(t: np.ndarray) -> np.ndarray:
    """Mirror a (C, H, W, ...) tensor along its width axis."""
    if t.ndim < 3:
        raise ShapeError(f"flip_width needs rank >= 3, got shape {t.shape}")
    return np.ascontiguousarray(np.flip(t, axis=WIDTH_AXIS))


def _check_window(shape, origin, extents):
    if not (len(origin) == len(extents) == len(shape)):
        raise ShapeError(
            f"window rank mismatch: shape {tuple(shape)}, origin {tuple(origin)}, extents {tuple(extents)}"
        )
    for o, e, n in zip(origin, extents, shape):
        if o < 0 or e < 1 or o + e > n:
            raise BoundsError(
                f"window origin {tuple(origin)} extents {tuple(extents)} exceeds shape {tuple(shape)}"
            )


def window(t: np.ndarray, origin: Sequence[int], extents: Sequence[int]) -> np.ndarray:
    """Independent copy of the sub-block starting at ``origin``."""
    _check_window(t.shape, origin, extents)
    sl = tuple(slice(o, o + e) for o, e in zip(origin, extents))
    return t[sl].copy()


def write_window(t: np.ndarray, origin: Sequence[int], block: np.ndarray) -> np.ndarray:
    """Return a copy of ``t`` with ``block`` written at ``origin``."""
    _check_window(t.shape, origin, block.shape)
    out = t.copy()
    sl = tuple(slice(o, o + e) for o, e in zip(origin, block.shape))
    out[sl] = block
    return out


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} shape mismatch: {a.shape} vs {b.shape}")
