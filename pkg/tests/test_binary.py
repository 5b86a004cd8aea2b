import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from beanna.binary import (
    PackedBits,
    binarize,
    n_words,
    pack_signs,
    popcount16,
    unpack,
    unpack_signs,
    valid_mask,
    word_contribution,
    xnor16,
    xnor_popcount_dot,
)

from oracles import pack_lsb_first, pm1_dot

pm1_vectors = st.integers(1, 200).flatmap(
    lambda n: st.tuples(
        st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n),
        st.lists(st.sampled_from([-1, 1]), min_size=n, max_size=n),
    )
)


def test_layout_lsb_first_with_zero_padding():
    signs = [1, -1, -1, 1] + [-1] * 12 + [1, 1]
    p = binarize(signs)
    assert p.length == 18
    assert list(p.words) == [0b1001, 0b11]
    assert list(p.words) == pack_lsb_first(signs)


def test_zero_binarizes_to_plus_one():
    assert list(unpack(binarize([0.0, -0.0, -1e-30]))) == [1, 1, -1]


def test_padding_bits_must_be_zero():
    with pytest.raises(ValueError):
        PackedBits(3, np.array([0b1000], np.uint16))
    with pytest.raises(ValueError):
        PackedBits(17, np.array([1], np.uint16))


def test_nan_cannot_be_binarized():
    with pytest.raises(ValueError):
        pack_signs(np.array([0.5, np.nan]))


def test_valid_mask():
    assert list(valid_mask(16)) == [0xFFFF]
    assert list(valid_mask(17)) == [0xFFFF, 0x0001]
    assert list(valid_mask(5)) == [0x1F]
    assert n_words(0) == 0 and n_words(1) == 1 and n_words(32) == 2


def test_popcount_and_xnor():
    assert popcount16(0) == 0 and popcount16(0xFFFF) == 16 and popcount16(0xA5A5) == 8
    assert xnor16(0xFF00, 0x0F0F) == 0x0F0F ^ 0xFF00 ^ 0xFFFF
    with pytest.raises(ValueError):
        popcount16(0x10000)


def test_dot_examples():
    assert xnor_popcount_dot(binarize([1, 1, 1]), binarize([1, 1, 1])) == 3
    assert xnor_popcount_dot(binarize([1, -1]), binarize([1, 1])) == 0
    n = 1024
    assert xnor_popcount_dot(binarize(np.ones(n)), binarize(np.ones(n))) == n
    assert xnor_popcount_dot(binarize(np.ones(n)), binarize(-np.ones(n))) == -n


def test_dot_errors():
    with pytest.raises(ValueError):
        xnor_popcount_dot(binarize([1, 1]), binarize([1, 1, 1]))
    with pytest.raises(ValueError):
        xnor_popcount_dot(PackedBits(0, np.zeros(0, np.uint16)), PackedBits(0, np.zeros(0, np.uint16)))


def test_dot_exhaustive_small():
    for n in range(1, 9):
        for w in itertools.product((-1, 1), repeat=n):
            pw = binarize(w)
            for i in itertools.product((-1, 1), repeat=n):
                assert xnor_popcount_dot(pw, binarize(i)) == pm1_dot(w, i)


@given(pm1_vectors)
def test_dot_matches_pm1_oracle(vecs):
    w, i = vecs
    assert xnor_popcount_dot(binarize(w), binarize(i)) == pm1_dot(w, i)


@given(pm1_vectors)
def test_pack_unpack_round_trip(vecs):
    w, _ = vecs
    assert list(unpack_signs(pack_signs(np.array(w)), len(w))) == w


def test_word_contribution_masks_padding():
    rng = np.random.default_rng(3)
    for tail in range(1, 17):
        w = rng.integers(0, 1 << 16, dtype=np.uint16) & valid_mask(tail)[0]
        a = rng.integers(0, 1 << 16, dtype=np.uint16) & valid_mask(tail)[0]
        got = int(word_contribution(np.uint16(w), np.uint16(a), valid_mask(tail)[0]))
        ws = unpack_signs(np.array([w]), tail)
        xs = unpack_signs(np.array([a]), tail)
        assert got == pm1_dot(ws, xs)
