"""bfloat16 emulation for the high-precision PE datapath.

Scalars are carried as :class:`Bf16` (the raw 16-bit pattern). The array
helpers at the bottom work on ``float32`` ndarrays whose values are always
exactly representable in bfloat16, which is how the simulator keeps its
state; converting to and from bit patterns is lossless.

Rounding is round-to-nearest-even everywhere. Subnormals are kept.
Every NaN result is the single quiet pattern ``0x7FC0``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CANONICAL_NAN = 0x7FC0
POS_INF = 0x7F80
NEG_INF = 0xFF80

_EXP_MASK = 0x7F80
_MANT_MASK = 0x007F
_NAN_F32 = np.uint32(CANONICAL_NAN << 16).view(np.float32)


def f32_to_bits(x: float) -> int:
    return struct.unpack("<I", struct.pack("<f", x))[0]


def bits_to_f32(u: int) -> float:
    return struct.unpack("<f", struct.pack("<I", u & 0xFFFFFFFF))[0]


def _round_bits(u: int) -> int:
    """Round a float32 bit pattern to the upper 16 bits, ties to even."""
    if (u & 0x7F800000) == 0x7F800000 and (u & 0x007FFFFF):
        return CANONICAL_NAN
    upper = u >> 16
    rest = u & 0xFFFF
    if rest > 0x8000 or (rest == 0x8000 and upper & 1):
        upper += 1  # a carry into the exponent gives the right result, incl. inf
    return upper & 0xFFFF


@dataclass(frozen=True)
class Bf16:
    """A bfloat16 value: 1 sign, 8 exponent (bias 127), 7 mantissa bits."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError(f"bf16 bit pattern out of range: {self.bits:#x}")

    @property
    def sign(self) -> int:
        return self.bits >> 15

    @property
    def exponent(self) -> int:
        return (self.bits & _EXP_MASK) >> 7

    @property
    def mantissa(self) -> int:
        return self.bits & _MANT_MASK

    def is_nan(self) -> bool:
        return self.exponent == 0xFF and self.mantissa != 0

    def __float__(self) -> float:
        return decode(self)

    def __repr__(self) -> str:
        return f"Bf16(0x{self.bits:04X}={decode(self)!r})"


def encode(x: float) -> Bf16:
    """Round a single-precision value to bfloat16.

    Python floats are first narrowed to float32, since the datapath only
    ever sees single-precision inputs.
    """
    return Bf16(_round_bits(f32_to_bits(x)))


def decode(a: Bf16) -> float:
    """Exact widening to float32 (returned as a Python float)."""
    return bits_to_f32(a.bits << 16)


def _f32(a: Bf16) -> np.float32:
    return np.float32(decode(a))


def mul(a: Bf16, b: Bf16) -> Bf16:
    # The product of two 8-bit significands fits a float32 exactly unless it
    # lands in the subnormal range, where float32 rounds first.
    with np.errstate(all="ignore"):
        return encode(float(_f32(a) * _f32(b)))


def add(a: Bf16, b: Bf16) -> Bf16:
    with np.errstate(all="ignore"):
        return encode(float(_f32(a) + _f32(b)))


def mac(acc: Bf16, a: Bf16, b: Bf16) -> Bf16:
    """``acc + a*b`` with the multiplier and the adder rounding separately."""
    return add(acc, mul(a, b))


# --- array forms -----------------------------------------------------------


def round_array(x: np.ndarray) -> np.ndarray:
    """Round a float32 array to bfloat16 values (still float32 storage)."""
    u = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32)
    upper = u >> 16
    rest = u & np.uint32(0xFFFF)
    up = (rest > 0x8000) | ((rest == 0x8000) & ((upper & 1) == 1))
    out = ((upper + up.astype(np.uint32)) << 16).view(np.float32)
    return np.where(np.isnan(x), _NAN_F32, out)


def to_bits(x: np.ndarray) -> np.ndarray:
    """float32 array -> uint16 bf16 patterns (rounding)."""
    r = round_array(np.asarray(x, dtype=np.float32))
    return (r.view(np.uint32) >> 16).astype(np.uint16)


def from_bits(b: np.ndarray) -> np.ndarray:
    """uint16 bf16 patterns -> float32 array (exact)."""
    return (np.asarray(b, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


def mul_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        return round_array(np.multiply(a, b, dtype=np.float32))


def add_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        return round_array(np.add(a, b, dtype=np.float32))


def mac_array(acc: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return add_array(acc, mul_array(a, b))
