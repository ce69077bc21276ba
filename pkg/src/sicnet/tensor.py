"""Dense rank-4 tensors in batch-channel-row-column layout.

Every activation in this library is a `Tensor4`: a contiguous NCHW array of
float32 ("single") or float64 ("double") values. Tensors are immutable after
construction; all operations return new tensors and never touch their inputs.
The channels-first layout keeps each per-channel spatial map contiguous, which
is what the intra-channel convolution kernels iterate over.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}
_HEADER = struct.Struct("<4I")


@dataclass(frozen=True)
class Shape4:
    """Dimensions of a rank-4 tensor: (batch, channels, height, width)."""

    batch: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("batch", "channels", "height", "width"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")

    def __iter__(self):
        yield from (self.batch, self.channels, self.height, self.width)

    @property
    def numel(self) -> int:
        return self.batch * self.channels * self.height * self.width


class Tensor4:
    """Immutable contiguous (batch, channels, height, width) value array."""

    __slots__ = ("data",)

    def __init__(self, data, precision: str | None = None, copy: bool = True):
        arr = np.array(data, copy=copy)
        if precision is not None:
            if precision not in PRECISIONS:
                raise ValueError(f"unknown precision {precision!r}")
            arr = arr.astype(PRECISIONS[precision], copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Tensor4 needs 4 dimensions, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all dimensions must be >= 1, got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor4 is immutable")

    # -- construction helpers -------------------------------------------------

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor4":
        """Adopt a freshly-computed array without copying it."""
        return cls(arr, copy=False)

    @classmethod
    def zeros(cls, shape, precision: str = "double") -> "Tensor4":
        return cls.wrap(np.zeros(tuple(shape), dtype=PRECISIONS[precision]))

    @classmethod
    def full(cls, shape, value: float, precision: str = "double") -> "Tensor4":
        return cls.wrap(np.full(tuple(shape), value, dtype=PRECISIONS[precision]))

    # -- inspection -----------------------------------------------------------

    @property
    def shape(self) -> Shape4:
        return Shape4(*self.data.shape)

    @property
    def precision(self) -> str:
        return "single" if self.data.dtype == np.float32 else "double"

    def __getitem__(self, index) -> float:
        """Checked scalar access at (batch, channel, row, column).

        Indices are 0-based and must lie strictly inside the tensor; negative
        indices are rejected rather than wrapped.
        """
        if not (isinstance(index, tuple) and len(index) == 4):
            raise TypeError("Tensor4 access requires a (b, c, y, x) tuple")
        for axis, (i, n) in enumerate(zip(index, self.data.shape)):
            i = int(i)
            if i < 0 or i >= n:
                raise IndexError(f"index {i} out of range [0, {n}) on axis {axis}")
        return float(self.data[index])

    def __repr__(self):
        b, c, h, w = self.data.shape
        return f"Tensor4({b}x{c}x{h}x{w}, {self.precision})"

    def astype(self, precision: str) -> "Tensor4":
        return Tensor4(self.data, precision=precision)

    # -- serialization --------------------------------------------------------
    #
    # Flat binary layout: a 16-byte header of four little-endian uint32 dims
    # (batch, channels, height, width) followed by the values as little-endian
    # IEEE-754, in layout order. Element width (4 or 8 bytes) is inferred from
    # the payload size.

    def tobytes(self) -> bytes:
        b, c, h, w = self.data.shape
        payload = self.data.astype(self.data.dtype.newbyteorder("<"), copy=False)
        return _HEADER.pack(b, c, h, w) + payload.tobytes()

    @classmethod
    def frombytes(cls, blob: bytes) -> "Tensor4":
        if len(blob) < _HEADER.size:
            raise ValueError("tensor blob shorter than 16-byte header")
        dims = _HEADER.unpack_from(blob)
        if min(dims) < 1:
            raise ValueError(f"invalid dimensions in header: {dims}")
        numel = int(np.prod(dims, dtype=np.int64))
        body = len(blob) - _HEADER.size
        if body == 4 * numel:
            dtype = "<f4"
        elif body == 8 * numel:
            dtype = "<f8"
        else:
            raise ValueError(
                f"payload of {body} bytes does not match {numel} single or double values"
            )
        arr = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size).reshape(dims)
        return cls(arr.astype(dtype.lstrip("<")))

    def save(self, path) -> None:
        Path(path).write_bytes(self.tobytes())

    @classmethod
    def load(cls, path) -> "Tensor4":
        return cls.frombytes(Path(path).read_bytes())


# -- elementwise and structural operations -----------------------------------


def zero_pad(t: Tensor4, top: int, bottom: int, left: int, right: int) -> Tensor4:
    """Pad the spatial border with zeros; interior values are unchanged."""
    for v in (top, bottom, left, right):
        if v < 0:
            raise ValueError("padding must be non-negative")
    if top == bottom == left == right == 0:
        return t
    out = np.pad(t.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return Tensor4.wrap(out)


def pad(t: Tensor4, amount: int) -> Tensor4:
    """Symmetric spatial zero padding by `amount` on all four sides."""
    return zero_pad(t, amount, amount, amount, amount)


def crop(t: Tensor4, top: int, bottom: int, left: int, right: int) -> Tensor4:
    """Remove rows/columns from the spatial border (inverse of zero_pad)."""
    _, _, h, w = t.data.shape
    if top + bottom >= h or left + right >= w:
        raise ValueError("crop would remove every row or column")
    return Tensor4.wrap(t.data[:, :, top : h - bottom, left : w - right].copy())


def relu(t: Tensor4) -> Tensor4:
    return Tensor4.wrap(np.maximum(t.data, 0))


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    return Tensor4.wrap(a.data + b.data)


def scale(t: Tensor4, factor: float) -> Tensor4:
    return Tensor4.wrap(t.data * t.data.dtype.type(factor))


def multiply(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    return Tensor4.wrap(a.data * b.data)


def channel_slice(t: Tensor4, start: int, stop: int) -> Tensor4:
    c = t.data.shape[1]
    if not (0 <= start < stop <= c):
        raise ValueError(f"invalid channel range [{start}, {stop}) for {c} channels")
    return Tensor4.wrap(t.data[:, start:stop].copy())


def channel_concat(*tensors: Tensor4) -> Tensor4:
    if not tensors:
        raise ValueError("need at least one tensor")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if (s[0], s[2], s[3]) != (ref[0], ref[2], ref[3]):
            raise ValueError("batch and spatial dimensions must match for concat")
    return Tensor4.wrap(np.concatenate([t.data for t in tensors], axis=1))
