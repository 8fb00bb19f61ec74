"""Complex tensors stored as two real planes.

A ``ComplexTensor`` keeps the real part and the imaginary part in separate
numpy arrays of identical shape and dtype.  4-D tensors use NCHW order.
Instances are immutable: the planes are flagged read-only on construction.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_plane(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True, order="C")
    arr.setflags(write=False)
    return arr


def _check_dtype(dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype.type not in DTYPES:
        raise TypeError(f"unsupported precision {dtype}; use float32 or float64")
    return dtype


class RealTensor:
    """Real-valued tensor (logits after the amplitude readout, losses)."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if dtype is None:
            dtype = getattr(data, "dtype", np.float64)
            if np.dtype(dtype).type not in DTYPES:
                dtype = np.float64
        self.data = _as_plane(data, _check_dtype(dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    @classmethod
    def wrap(cls, data: np.ndarray) -> "RealTensor":
        out = cls.__new__(cls)
        data.setflags(write=False)
        out.data = data
        return out

    def __repr__(self) -> str:
        return f"RealTensor(shape={self.shape}, dtype={self.dtype})"


class ComplexTensor:
    """N-dimensional complex array in split real/imaginary representation."""

    __slots__ = ("re", "im")

    def __init__(self, re, im=None, dtype=None):
        if dtype is None:
            dtype = getattr(re, "dtype", np.float64)
            if np.dtype(dtype).type not in DTYPES:
                dtype = np.float64
        dtype = _check_dtype(dtype)
        re = _as_plane(re, dtype)
        im = np.zeros_like(re) if im is None else _as_plane(im, dtype)
        if re.shape != im.shape:
            raise ShapeError(f"real plane {re.shape} and imaginary plane {im.shape} differ")
        self.re = re
        self.im = im

    @classmethod
    def wrap(cls, re: np.ndarray, im: np.ndarray) -> "ComplexTensor":
        """Adopt freshly computed planes without copying; marks them read-only."""
        if re.shape != im.shape:
            raise ShapeError(f"real plane {re.shape} and imaginary plane {im.shape} differ")
        if re.dtype != im.dtype:
            raise TypeError(f"plane precisions differ: {re.dtype} vs {im.dtype}")
        out = cls.__new__(cls)
        re.setflags(write=False)
        im.setflags(write=False)
        out.re = re
        out.im = im
        return out

    @classmethod
    def from_complex(cls, z, dtype=np.float64) -> "ComplexTensor":
        z = np.asarray(z)
        return cls(z.real, z.imag, dtype=dtype)

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype=np.float64) -> "ComplexTensor":
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype), dtype=dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    @property
    def dtype(self) -> np.dtype:
        return self.re.dtype

    @property
    def size(self) -> int:
        return self.re.size

    @property
    def ndim(self) -> int:
        return self.re.ndim

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def astype(self, dtype) -> "ComplexTensor":
        return ComplexTensor(self.re, self.im, dtype=dtype)

    def __add__(self, other: "ComplexTensor") -> "ComplexTensor":
        return elementwise_add(self, other)

    def __mul__(self, other: "ComplexTensor") -> "ComplexTensor":
        return elementwise_mul(self, other)

    def __getitem__(self, key) -> "ComplexTensor":
        return ComplexTensor(self.re[key], self.im[key])

    def __repr__(self) -> str:
        return f"ComplexTensor(shape={self.shape}, dtype={self.dtype})"


def _same_shape(a: ComplexTensor, b: ComplexTensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: precision mismatch {a.dtype} vs {b.dtype}")


def elementwise_add(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    _same_shape(a, b, "add")
    return ComplexTensor(a.re + b.re, a.im + b.im)


def elementwise_mul(a: ComplexTensor, b: ComplexTensor) -> ComplexTensor:
    _same_shape(a, b, "mul")
    return ComplexTensor(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re)


def modulus(a: ComplexTensor) -> RealTensor:
    """Length of each complex element, sqrt(re^2 + im^2)."""
    return RealTensor(np.sqrt(a.re * a.re + a.im * a.im))


def area_score(a: ComplexTensor) -> RealTensor:
    """|re * im| per element; the selection score of area max-pooling."""
    return RealTensor(np.abs(a.re * a.im))


def reshape(a: ComplexTensor, shape: Sequence[int]) -> ComplexTensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    return ComplexTensor(a.re.reshape(shape), a.im.reshape(shape))


def slice_(a: ComplexTensor, bounds: Sequence[tuple[int, int]]) -> ComplexTensor:
    """Take ``[start, stop)`` along each leading axis listed in ``bounds``."""
    if len(bounds) > a.ndim:
        raise ShapeError(f"{len(bounds)} slice bounds for a {a.ndim}-d tensor")
    key = []
    for axis, (start, stop) in enumerate(bounds):
        n = a.shape[axis]
        if not 0 <= start <= stop <= n:
            raise ShapeError(f"slice [{start}, {stop}) out of bounds for axis {axis} of extent {n}")
        key.append(slice(start, stop))
    return a[tuple(key)]


def pad(a: ComplexTensor, widths: Sequence[tuple[int, int]]) -> ComplexTensor:
    """Zero-pad (0+0j) with ``(before, after)`` per axis; missing axes are unpadded."""
    widths = list(widths) + [(0, 0)] * (a.ndim - len(widths))
    if len(widths) != a.ndim or any(lo < 0 or hi < 0 for lo, hi in widths):
        raise ShapeError(f"invalid pad widths {widths} for shape {a.shape}")
    return ComplexTensor(np.pad(a.re, widths), np.pad(a.im, widths))


def pad_spatial(a: ComplexTensor, p: int) -> ComplexTensor:
    """Pad the last two axes by ``p`` on every edge."""
    return pad(a, [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)])


def concat(tensors: Sequence[ComplexTensor], axis: int = 1) -> ComplexTensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim or t.dtype != first.dtype:
            raise ShapeError(f"concat: incompatible tensors {first!r} and {t!r}")
        rest_a = first.shape[:axis] + first.shape[axis + 1:]
        rest_b = t.shape[:axis] + t.shape[axis + 1:]
        if rest_a != rest_b:
            raise ShapeError(f"concat along axis {axis}: {first.shape} vs {t.shape}")
    return ComplexTensor(
        np.concatenate([t.re for t in tensors], axis=axis),
        np.concatenate([t.im for t in tensors], axis=axis),
    )
