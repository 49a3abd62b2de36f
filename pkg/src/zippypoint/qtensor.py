"""Numeric representations used across the stack.

Three carriers move through the network:

* plain float32 ndarrays for full-precision tensors,
* ``QTensor`` for affine-quantized int8 tensors,
* ``BitTensor`` for sign-binarized tensors packed into 64-bit words.

Quantization is per-tensor affine: ``value = scale * (code - zero_point)``
with int8 codes in [-128, 127]. Encoding rounds half away from zero; ties
at .5 therefore never depend on the platform rounding mode.

Bit packing runs along the last (channel) axis. Each run of ``shape[-1]``
bits is padded to a whole number of 64-bit words; within a word, bit ``i``
holds logical position ``64*j + i`` (little-endian bit order). Padding bits
are always zero, which keeps word-level equality and XOR/popcount honest.
A set bit encodes +1, a clear bit encodes -1.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidInputError, InvalidParameterError

WORD_BITS = 64


def round_half_away(x):
    """Round to nearest integer, ties away from zero. Returns float array."""
    x = np.asarray(x)
    return np.trunc(x + np.copysign(0.5, x))


def words_per_run(n_bits: int) -> int:
    return -(-n_bits // WORD_BITS)


@dataclass(frozen=True)
class QTensor:
    """Affine-quantized int8 tensor: value = scale * (code - zero_point)."""

    codes: np.ndarray
    scale: float
    zero_point: int

    def __post_init__(self):
        if self.codes.dtype != np.int8:
            raise InvalidInputError(f"codes must be int8, got {self.codes.dtype}")
        if not (np.isfinite(self.scale) and self.scale > 0.0):
            raise InvalidParameterError(f"scale must be finite and positive, got {self.scale}")
        if not (-128 <= int(self.zero_point) <= 127):
            raise InvalidParameterError(f"zero_point must fit int8, got {self.zero_point}")

    @property
    def shape(self):
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def quantize(values, scale: float, zero_point: int = 0) -> QTensor:
    """Encode float values as int8 codes, clamping to [-128, 127].

    Representable values span scale*(-128-zp) .. scale*(127-zp); anything
    outside saturates. Non-finite input is rejected rather than clamped.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("quantize: input contains non-finite values")
    if not (np.isfinite(scale) and scale > 0.0):
        raise InvalidParameterError(f"quantize: scale must be positive, got {scale}")
    if not (-128 <= int(zero_point) <= 127):
        raise InvalidParameterError(f"quantize: zero_point must fit int8, got {zero_point}")
    q = values / scale
    # round_half_away inlined over q's own buffer, same ops in the same order
    adj = np.copysign(0.5, q)
    np.add(q, adj, out=q)
    np.trunc(q, out=q)
    if int(zero_point) != 0:
        q += int(zero_point)
    np.clip(q, -128, 127, out=q)
    return QTensor(q.astype(np.int8), float(scale), int(zero_point))


def dequantize(t: QTensor) -> np.ndarray:
    return (t.codes.astype(np.float32) - np.float32(t.zero_point)) * np.float32(t.scale)


@dataclass(frozen=True)
class BitTensor:
    """Sign bits packed 64 per word along the last axis of ``shape``.

    ``words`` has shape (prod(shape[:-1]), words_per_run(shape[-1])).
    Bits at positions >= shape[-1] in the last word of a run are zero.
    """

    shape: tuple
    words: np.ndarray

    def __post_init__(self):
        if self.words.dtype != np.uint64:
            raise InvalidInputError(f"words must be uint64, got {self.words.dtype}")
        runs = int(np.prod(self.shape[:-1], dtype=np.int64)) if len(self.shape) > 1 else 1
        wpr = words_per_run(self.shape[-1])
        if self.words.shape != (runs, wpr):
            raise DimensionError(
                f"words shape {self.words.shape} does not match {(runs, wpr)} for shape {self.shape}"
            )

    @property
    def n_bits(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def _tail_mask(n_bits: int) -> np.uint64:
    """Mask selecting the valid bits of the final word in a run."""
    rem = n_bits % WORD_BITS
    if rem == 0:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return np.uint64((1 << rem) - 1)


def pack_bits(bits) -> BitTensor:
    """Pack a 0/1 (or bool) array into a BitTensor along its last axis."""
    bits = np.asarray(bits)
    if bits.ndim == 0:
        raise DimensionError("pack_bits: need at least one axis")
    if bits.shape[-1] == 0:
        raise DimensionError("pack_bits: last axis must be non-empty")
    shape = bits.shape
    n = shape[-1]
    flat = np.ascontiguousarray(bits.reshape(-1, n) != 0)
    wpr = words_per_run(n)
    packed = np.packbits(flat, axis=1, bitorder="little")
    if packed.shape[1] < wpr * 8:
        pad = np.zeros((packed.shape[0], wpr * 8 - packed.shape[1]), dtype=np.uint8)
        packed = np.concatenate([packed, pad], axis=1)
    words = packed.view("<u8").astype(np.uint64, copy=False)
    return BitTensor(tuple(shape), np.ascontiguousarray(words))


def unpack_bits(t: BitTensor) -> np.ndarray:
    """Inverse of pack_bits; returns a uint8 array of 0/1 with t.shape."""
    n = t.shape[-1]
    byts = np.ascontiguousarray(t.words).view(np.uint8).reshape(t.words.shape[0], -1)
    bits = np.unpackbits(byts, axis=1, bitorder="little")[:, :n]
    return bits.reshape(t.shape).astype(np.uint8)


def binarize(values) -> BitTensor:
    """Sign binarization: v >= 0 maps to +1 (bit set), v < 0 to -1.

    Zero lands on +1 so that the bit image of a tensor and of its negation
    partition cleanly; downstream dot products rely on every position
    carrying exactly one of the two values.
    """
    values = np.asarray(values)
    if values.dtype == np.int8:
        raise InvalidInputError("binarize: pass floats or use binarize_codes for QTensor")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("binarize: input contains non-finite values")
    return pack_bits(values >= 0)


def binarize_codes(t: QTensor) -> BitTensor:
    """Binarize a quantized tensor without dequantizing.

    value >= 0 is exactly code >= zero_point, so the sign comes straight
    off the int8 codes.
    """
    return pack_bits(t.codes >= np.int8(t.zero_point))


def popcount_words(words: np.ndarray) -> np.ndarray:
    """Per-element popcount of a uint64 array."""
    return np.bitwise_count(words)
