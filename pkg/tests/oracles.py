"""Independent reference implementations used to freeze expected values.

Nothing here imports the library's arithmetic; each oracle is a separate,
deliberately plain formulation.
"""

from __future__ import annotations

import math
import struct
from fractions import Fraction

import numpy as np

NAN16 = 0x7FC0


# --- bfloat16 -----------------------------------------------------------------


def round_shift_bits(u: np.ndarray) -> np.ndarray:
    """float32 bit patterns -> bf16 patterns by the add-and-shift trick."""
    u = np.asarray(u, dtype=np.uint64)
    out = (u + 0x7FFF + ((u >> 16) & 1)) >> 16
    nan = ((u & 0x7F800000) == 0x7F800000) & ((u & 0x007FFFFF) != 0)
    return np.where(nan, NAN16, out).astype(np.uint16)


def round_shift(x: np.ndarray) -> np.ndarray:
    """float32 values -> bf16 values (as float32)."""
    bits = round_shift_bits(np.asarray(x, np.float32).view(np.uint32))
    return (bits.astype(np.uint32) << 16).view(np.float32)


def _bf16_grid_value(bits: int) -> Fraction | float:
    f = struct.unpack("<f", struct.pack("<I", bits << 16))[0]
    return f if math.isinf(f) else Fraction(f)


def exact_rne_bits(x: float) -> int:
    """RNE to bf16 of a finite float32 value using exact rationals.

    Brackets ``x`` between adjacent bf16 patterns of the same sign and picks
    the nearer, ties to the even pattern; overflow past the largest finite
    value goes to infinity when the exact midpoint is reached.
    """
    f32 = struct.unpack("<I", struct.pack("<f", x))[0]
    sign = f32 & 0x80000000
    mag = f32 & 0x7FFFFFFF
    lo = mag >> 16  # truncation is the lower neighbour in magnitude
    hi = lo + 1
    xv = abs(Fraction(struct.unpack("<f", struct.pack("<I", mag))[0]))
    lv = _bf16_grid_value(lo)
    if xv == lv:
        pick = lo
    else:
        if hi == 0x7F80:
            # midpoint between max finite and the next (virtual) grid point
            step = Fraction(2) ** (127 - 7)
            hv = lv + step
        else:
            hv = _bf16_grid_value(hi)
        d_lo, d_hi = xv - lv, hv - xv
        if d_lo < d_hi:
            pick = lo
        elif d_hi < d_lo:
            pick = hi
        else:
            pick = lo if lo % 2 == 0 else hi
    return (sign >> 16) | pick


# --- binary -----------------------------------------------------------------


def pm1_dot(w, i) -> int:
    return int(sum(int(a) * int(b) for a, b in zip(w, i)))


def pack_lsb_first(signs) -> list[int]:
    """±1 sequence -> list of 16-bit words, element k at bit k % 16."""
    words = [0] * (-(-len(signs) // 16))
    for k, s in enumerate(signs):
        if s > 0:
            words[k // 16] |= 1 << (k % 16)
    return words


# --- tiles --------------------------------------------------------------------


def float_tile_reference(w: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Straight-line FLOAT tile: per column, sum rows 0..15 from +0.0.

    ``w`` is (16, 16) bf16-exact float32, ``a`` is (B, 16). Each step is a
    bf16 multiply then a bf16 add, both rounded by :func:`round_shift`.
    """
    b = a.shape[0]
    out = np.zeros((b, 16), np.float32)
    with np.errstate(all="ignore"):
        for r in range(16):
            prod = round_shift(a[:, r : r + 1].astype(np.float32) * w[r : r + 1, :])
            out = round_shift(out + prod)
    return out


def binary_tile_reference(w: np.ndarray, a: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Straight-line BINARY tile on explicit ±1 values.

    ``w``, ``mask``: (16, 16) uint16 words (row = inner word, col = output);
    ``a``: (B, 16) uint16 words. Only bits set in ``mask`` take part.
    """
    b = a.shape[0]
    out = np.zeros((b, 16), np.int64)
    bits = np.arange(16)
    for r in range(16):
        m = ((mask[r][:, None] >> bits) & 1).astype(bool)  # (16 cols, 16 bits)
        ws = np.where((w[r][:, None] >> bits) & 1, 1, -1)  # (16, 16)
        xs = np.where((a[:, r][:, None] >> bits) & 1, 1, -1)  # (B, 16)
        out += np.einsum("bk,ck->bc", xs, ws * m)
    return out


def matmul_reference(layer_in: np.ndarray, w_real: np.ndarray, precision: str) -> np.ndarray:
    """Untiled layer sum for checking the tiled paths: exact in float64
    for FLOAT (used with tolerances only) or ±1 integers for BINARY."""
    if precision == "binary":
        return np.where(layer_in >= 0, 1, -1) @ np.where(w_real >= 0, 1, -1).T
    return layer_in.astype(np.float64) @ w_real.astype(np.float64).T


# --- random inputs -------------------------------------------------------------


def random_bf16(rng, shape, specials: float = 0.0) -> np.ndarray:
    """bf16-exact float32 values; optionally sprinkle zeros, infs and NaNs."""
    x = round_shift(rng.standard_normal(shape).astype(np.float32) * np.float32(4.0))
    if specials:
        pick = rng.random(shape) < specials
        pool = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 1e-39], np.float32)
        x = np.where(pick, round_shift(pool[rng.integers(0, len(pool), shape)]), x)
    return x.astype(np.float32)


def random_tile_jobs(rng, mode: str, count: int, max_batch: int = 64):
    """``(weights, activations, mask)`` tuples with B drawn from 1..max_batch."""
    jobs = []
    for _ in range(count):
        b = int(rng.integers(1, max_batch + 1))
        if mode == "float":
            jobs.append((random_bf16(rng, (16, 16), 0.02), random_bf16(rng, (b, 16), 0.02), None))
        else:
            w = rng.integers(0, 1 << 16, (16, 16), dtype=np.uint16)
            a = rng.integers(0, 1 << 16, (b, 16), dtype=np.uint16)
            mask = np.full((16, 16), 0xFFFF, np.uint16)
            if rng.random() < 0.5:  # ragged inner dimension
                valid = int(rng.integers(1, 257))  # valid inner bits out of 256
                per_word = np.zeros(16, np.uint16)
                full, tail = divmod(valid, 16)
                per_word[:full] = 0xFFFF
                if tail:
                    per_word[full] = (1 << tail) - 1
                mask = np.repeat(per_word[:, None], 16, axis=1)
                w &= mask
                a &= mask[:, 0][None, :]
            jobs.append((w, a, mask))
    return jobs
