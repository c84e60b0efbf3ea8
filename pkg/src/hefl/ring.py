"""Fixed-point reals over the ring Z/2^64 Z.

Ring elements are stored as ``numpy.uint64`` so that addition and
multiplication wrap natively.  Residues with the top bit set decode as
negative (two's complement).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RING_BITS = 64
Q = 1 << RING_BITS
DTYPE = np.uint64


@dataclass(frozen=True)
class FixedPointCodec:
    frac_bits: int = 16

    def __post_init__(self):
        if not 0 <= self.frac_bits < RING_BITS - 2:
            raise ValueError(f"frac_bits out of range: {self.frac_bits}")

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def max_magnitude(self) -> float:
        return float(2 ** (RING_BITS - 1 - self.frac_bits - 1))

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.frac_bits


DEFAULT_CODEC = FixedPointCodec()


def as_ring(values) -> np.ndarray:
    """Coerce python ints (possibly negative or >= 2^63) to a uint64 array."""
    arr = values if isinstance(values, np.ndarray) else np.asarray(values, dtype=object)
    if arr.dtype == DTYPE:
        return arr
    if arr.dtype == object and not all(isinstance(v, (int, np.integer)) for v in arr.ravel().tolist()):
        raise TypeError("ring elements must be integers")
    if arr.dtype == object or arr.dtype.kind in "iu":
        flat = [int(v) % Q for v in arr.ravel().tolist()]
        return np.array(flat, dtype=DTYPE).reshape(arr.shape)
    raise TypeError(f"cannot interpret dtype {arr.dtype} as ring elements")


def to_signed(r) -> np.ndarray:
    return np.asarray(r, dtype=DTYPE).view(np.int64)


def from_signed(v) -> np.ndarray:
    return np.asarray(v, dtype=np.int64).view(DTYPE)


def encode_fixed(x, codec: FixedPointCodec = DEFAULT_CODEC, frac_bits: int | None = None):
    """round(x * 2^f) as a ring element; raises OverflowError outside the codec range.

    ``frac_bits`` overrides the codec's precision, e.g. to build a 2f-scaled
    reference value.
    """
    f = codec.frac_bits if frac_bits is None else frac_bits
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise OverflowError("cannot encode non-finite value")
    bound = 2.0 ** (RING_BITS - 2 - f)
    if arr.size and np.max(np.abs(arr)) >= bound:
        raise OverflowError(f"|x| >= {bound:g} is not encodable with {f} fractional bits")
    out = np.rint(arr * (1 << f)).astype(np.int64).view(DTYPE)
    return out[()] if out.ndim == 0 else out


def decode_fixed(r, codec: FixedPointCodec = DEFAULT_CODEC, frac_bits: int | None = None):
    f = codec.frac_bits if frac_bits is None else frac_bits
    out = to_signed(r).astype(np.float64) / (1 << f)
    return out[()] if np.ndim(out) == 0 else out


def ring_add(a, b):
    return np.add(np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE))


def ring_sub(a, b):
    return np.subtract(np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE))


def ring_mul(a, b):
    return np.multiply(np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE))


def ring_neg(a):
    return np.subtract(DTYPE(0), np.asarray(a, dtype=DTYPE))


def trunc_signed(r, bits: int):
    """Arithmetic right shift of ring elements viewed as signed integers."""
    return from_signed(to_signed(r) >> bits)


def random_ring(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, Q, size=shape, dtype=DTYPE, endpoint=False)
