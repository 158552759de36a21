"""Tensor value types: bit-packed bipolar tensors, low-bit integer tensors, float tensors.

Packing layout: a tensor of shape ``[d0, d1, ...]`` is viewed as ``d0`` rows of
``prod(d1, ...)`` elements (1-D tensors are a single row). Each row is padded to a
multiple of 64 bits; within a word the least significant bit holds the lowest
logical index. A set bit encodes +1, a clear bit -1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

WORD_BITS = 64
VALID_BITS = (1, 2, 4, 8, 16, 32)


class NonBipolarValue(ValueError):
    def __init__(self, index):
        super().__init__(f"element at index {index} is not +1 or -1")
        self.index = index


class InvalidBits(ValueError):
    pass


class NonPositiveScale(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _row_split(shape: Sequence[int]) -> tuple[int, int]:
    shape = tuple(shape)
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return 1, shape[0]
    return shape[0], int(np.prod(shape[1:]))


def words_per_row(n: int) -> int:
    return max(1, -(-n // WORD_BITS))


def round_half_up(v):
    """floor(v + 0.5) without the rounding error of computing ``v + 0.5``."""
    v = np.asarray(v, dtype=np.float64)
    f = np.floor(v)
    return f + ((v - f) >= 0.5)


@dataclass(frozen=True, eq=False)
class FTensor:
    shape: tuple
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64).reshape(self.shape)
        if not np.all(np.isfinite(data)):
            raise ValueError("FTensor admits finite values only")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def of(cls, values) -> "FTensor":
        values = np.asarray(values, dtype=np.float64)
        return cls(values.shape, values)

    def to_float(self) -> np.ndarray:
        return self.data

    def __eq__(self, other):
        return (isinstance(other, FTensor) and self.shape == other.shape
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class QTensor:
    """Signed integer tensor; real value = data * scale (zero point fixed at 0).

    ``scale`` is a scalar or a per-channel vector along axis 0.
    """
    shape: tuple
    data: np.ndarray
    bits: int
    scale: Union[float, np.ndarray] = 1.0
    zero_point: int = 0

    def __post_init__(self):
        if self.bits not in VALID_BITS:
            raise InvalidBits(f"bits={self.bits} not in {VALID_BITS}")
        shape = tuple(int(s) for s in self.shape)
        data = np.asarray(self.data).reshape(shape)
        if data.size and not np.issubdtype(data.dtype, np.integer):
            if not np.array_equal(data, np.round(data)):
                raise ValueError("QTensor data must be integers")
        data = data.astype(np.int64)
        lo, hi = -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
        if data.size and (data.min() < lo or data.max() > hi):
            raise ValueError(f"values out of {self.bits}-bit range [{lo}, {hi}]")
        scale = np.asarray(self.scale, dtype=np.float64)
        if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
            raise NonPositiveScale("scale must be positive and finite")
        if scale.ndim == 0:
            scale = float(scale)
        else:
            if scale.shape != (shape[0],):
                raise ValueError(f"per-channel scale length {scale.shape} != channel dim {shape[0]}")
            scale = _frozen(scale)
        if self.zero_point != 0:
            raise ValueError("only symmetric quantization (zero_point=0) is supported")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "scale", scale)

    @property
    def per_channel(self) -> bool:
        return not isinstance(self.scale, float)

    def scale_array(self) -> np.ndarray:
        """Scale broadcastable against ``data``."""
        s = np.asarray(self.scale, dtype=np.float64)
        if s.ndim:
            s = s.reshape((-1,) + (1,) * (len(self.shape) - 1))
        return s

    def to_float(self) -> np.ndarray:
        return self.data * self.scale_array()

    def to_int(self) -> np.ndarray:
        return self.data

    def __eq__(self, other):
        return (isinstance(other, QTensor) and self.shape == other.shape
                and self.bits == other.bits
                and np.array_equal(np.asarray(self.scale), np.asarray(other.scale))
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class PackedBitTensor:
    shape: tuple
    words: np.ndarray  # uint64, (rows, words_per_row)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        rows, n = _row_split(shape)
        words = np.asarray(self.words, dtype=np.uint64).reshape(rows, words_per_row(n))
        tail = n % WORD_BITS
        if tail and np.any(words[:, -1] >> np.uint64(tail)):
            raise ValueError("padding bits must be zero")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "words", _frozen(words))

    @property
    def bits(self) -> int:
        return 1

    @property
    def scale(self) -> float:
        return 1.0

    @property
    def row_length(self) -> int:
        return _row_split(self.shape)[1]

    def to_float(self) -> np.ndarray:
        return unpack_bipolar(self).astype(np.float64)

    def to_int(self) -> np.ndarray:
        return unpack_bipolar(self)

    def __eq__(self, other):
        return (isinstance(other, PackedBitTensor) and self.shape == other.shape
                and np.array_equal(self.words, other.words))


Tensor = Union[FTensor, QTensor, PackedBitTensor]


def pack_rows(bits01: np.ndarray) -> np.ndarray:
    """Pack a (rows, n) array of 0/1 into (rows, words) uint64, LSB = lowest index."""
    bits01 = np.asarray(bits01, dtype=np.uint8)
    rows, n = bits01.shape
    nw = words_per_row(n)
    padded = np.zeros((rows, nw * WORD_BITS), dtype=np.uint8)
    padded[:, :n] = bits01
    by = np.packbits(padded, axis=1, bitorder="little")
    return by.view("<u8").astype(np.uint64).reshape(rows, nw)


def unpack_rows(words: np.ndarray, n: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    by = words.view(np.uint8).reshape(words.shape[0], -1)
    return np.unpackbits(by, axis=1, bitorder="little")[:, :n]


def pack_bipolar(t) -> PackedBitTensor:
    """Pack a tensor of exact +1/-1 values."""
    values = t.data if isinstance(t, FTensor) else np.asarray(t)
    bad = np.flatnonzero((values != 1) & (values != -1))
    if bad.size:
        raise NonBipolarValue(np.unravel_index(bad[0], values.shape) if values.ndim > 1 else int(bad[0]))
    rows, n = _row_split(values.shape)
    words = pack_rows((values.reshape(rows, n) > 0).astype(np.uint8))
    return PackedBitTensor(values.shape, words)


def unpack_bipolar(p: PackedBitTensor) -> np.ndarray:
    rows, n = _row_split(p.shape)
    b = unpack_rows(p.words, n).astype(np.int64)
    return (2 * b - 1).reshape(p.shape)


def quantize_uniform(t, bits: int, scale) -> QTensor:
    """Symmetric uniform quantizer: clamp(round(t / scale)), rounding half up."""
    if bits not in (2, 4, 8):
        raise InvalidBits(f"bits={bits}; uniform quantization supports 2, 4 or 8")
    values = t.data if isinstance(t, FTensor) else np.asarray(t, dtype=np.float64)
    scale_arr = np.asarray(scale, dtype=np.float64)
    if np.any(scale_arr <= 0):
        raise NonPositiveScale(f"scale={scale}")
    s = scale_arr.reshape((-1,) + (1,) * (values.ndim - 1)) if scale_arr.ndim else scale_arr
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    data = np.clip(round_half_up(values / s), lo, hi).astype(np.int64)
    return QTensor(values.shape, data, bits, scale_arr if scale_arr.ndim else float(scale_arr))


def dequantize(q: Tensor) -> np.ndarray:
    return q.to_float()
