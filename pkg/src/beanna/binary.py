"""Sign binarization, 16-bit word packing and the XNOR-popcount dot product.

Layout: element ``i`` lives at bit ``i % 16`` of word ``i // 16`` (LSB
first). Bit 1 means +1, bit 0 means -1, and padding bits past the length
are always 0. ``sgn(0)`` is +1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 16

# popcount of every 16-bit word
POPCOUNT16 = np.array([bin(i).count("1") for i in range(1 << 16)], dtype=np.uint8)


def n_words(length: int) -> int:
    return -(-length // WORD_BITS)


def valid_mask(length: int) -> np.ndarray:
    """Per-word masks with a 1 for every in-range element."""
    words = n_words(length)
    mask = np.full(words, 0xFFFF, dtype=np.uint16)
    tail = length % WORD_BITS
    if words and tail:
        mask[-1] = (1 << tail) - 1
    return mask


@dataclass(frozen=True, eq=False)
class PackedBits:
    length: int
    words: np.ndarray

    def __post_init__(self):
        words = np.asarray(self.words, dtype=np.uint16)
        if words.shape != (n_words(self.length),):
            raise ValueError(
                f"{self.length} elements need {n_words(self.length)} words, got {words.shape}"
            )
        if np.any(words & ~valid_mask(self.length)):
            raise ValueError("padding bits must be zero")
        words = words.copy()
        words.flags.writeable = False
        object.__setattr__(self, "words", words)

    def __eq__(self, other):
        if not isinstance(other, PackedBits):
            return NotImplemented
        return self.length == other.length and np.array_equal(self.words, other.words)

    def __len__(self):
        return self.length


def pack_signs(values: np.ndarray) -> np.ndarray:
    """Pack the sign bits of the last axis of ``values`` into uint16 words.

    Works on any leading shape: ``(..., N) -> (..., ceil(N/16))``.
    """
    v = np.asarray(values)
    if np.issubdtype(v.dtype, np.floating) and np.isnan(v).any():
        raise ValueError("cannot binarize NaN")
    bits = (v >= 0).astype(np.uint16)
    n = bits.shape[-1]
    pad = n_words(n) * WORD_BITS - n
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), np.uint16)], axis=-1)
    bits = bits.reshape(bits.shape[:-1] + (-1, WORD_BITS))
    weights = (np.uint16(1) << np.arange(WORD_BITS, dtype=np.uint16)).astype(np.uint16)
    return (bits * weights).sum(axis=-1, dtype=np.uint32).astype(np.uint16)


def unpack_signs(words: np.ndarray, length: int) -> np.ndarray:
    """Inverse of :func:`pack_signs`: ±1 int8 values along the last axis."""
    w = np.asarray(words, dtype=np.uint16)
    shifts = np.arange(WORD_BITS, dtype=np.uint16)
    bits = (w[..., None] >> shifts) & 1
    bits = bits.reshape(w.shape[:-1] + (-1,))[..., :length]
    return (2 * bits.astype(np.int8) - 1).astype(np.int8)


def binarize(v) -> PackedBits:
    v = np.asarray(v, dtype=np.float64)
    return PackedBits(v.shape[0], pack_signs(v))


def unpack(p: PackedBits) -> np.ndarray:
    return unpack_signs(p.words, p.length)


def popcount16(word: int) -> int:
    if not 0 <= word <= 0xFFFF:
        raise ValueError(f"not a 16-bit word: {word}")
    return int(POPCOUNT16[word])


def xnor16(a, b):
    return ~(a ^ b) & 0xFFFF


def xnor_popcount_dot(w: PackedBits, i: PackedBits) -> int:
    """Integer dot product of two ±1 vectors: ``2 * agreements - N``."""
    if w.length != i.length:
        raise ValueError(f"length mismatch: {w.length} vs {i.length}")
    if w.length == 0:
        raise ValueError("empty vectors")
    agree = np.bitwise_and(~(w.words ^ i.words), valid_mask(w.length))
    p = int(POPCOUNT16[agree].sum(dtype=np.int64))
    return 2 * p - w.length


def word_contribution(w, a, mask):
    """Per-word PE contribution ``2*popcount(xnor & mask) - popcount(mask)``.

    Vectorised over any broadcastable uint16 arrays; returns int32.
    """
    agree = ~(w ^ a) & mask
    return 2 * POPCOUNT16[agree].astype(np.int32) - POPCOUNT16[mask].astype(np.int32)
