"""Codec, ring arithmetic, and seeded RNG stream tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgm.core import (
    FixedPointOverflowError,
    ParamVec,
    RingVec,
    decode_fixed,
    derive_rng,
    encode_fixed,
    ring_sum,
)


def pv(values):
    values = np.asarray(values, dtype=np.float64)
    return ParamVec(values, (("x", (values.size,)),))


class TestFixedPointCodec:
    def test_encode_one(self):
        assert encode_fixed(pv([1.0]), 24).words[0] == 16777216

    def test_encode_minus_one_wraps(self):
        assert encode_fixed(pv([-1.0]), 24).words[0] == 2**64 - 16777216

    def test_decode_with_divisor(self):
        r = RingVec(np.array([100663296], dtype=np.uint64), scale_bits=24)
        assert decode_fixed(r, divisor=3).values[0] == 2.0

    def test_decode_zero_words(self):
        r = RingVec(np.zeros(5, dtype=np.uint64), scale_bits=24)
        assert np.all(decode_fixed(r).values == 0.0)

    def test_round_trip_1000_random(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(-100, 100, size=1000)
        back = decode_fixed(encode_fixed(pv(x), 24))
        assert np.abs(back.values - x).max() <= 2.0**-25

    @settings(max_examples=50, deadline=None)
    @given(
        scale_bits=st.integers(min_value=8, max_value=40),
        x=st.lists(st.floats(min_value=-1000, max_value=1000), min_size=1, max_size=8),
    )
    def test_round_trip_error_bound(self, scale_bits, x):
        back = decode_fixed(encode_fixed(pv(x), scale_bits))
        assert np.abs(back.values - np.asarray(x)).max() <= 2.0 ** (-scale_bits - 1)

    def test_overflow_rejected(self):
        with pytest.raises(FixedPointOverflowError):
            encode_fixed(pv([2.0**40]), 24)

    def test_scale_bits_range(self):
        with pytest.raises(ValueError):
            encode_fixed(pv([1.0]), 7)
        with pytest.raises(ValueError):
            encode_fixed(pv([1.0]), 41)

    def test_layout_preserved(self):
        p = ParamVec(np.arange(6, dtype=np.float64), (("a", (2, 2)), ("b", (2,))))
        r = encode_fixed(p, 16)
        assert r.layout == p.layout
        assert decode_fixed(r).layout == p.layout


class TestRingArithmetic:
    def test_add_wraps(self):
        a = RingVec(np.array([2**64 - 1], dtype=np.uint64), 24)
        b = RingVec(np.array([2], dtype=np.uint64), 24)
        assert (a + b).words[0] == 1

    def test_sub_wraps(self):
        a = RingVec(np.array([1], dtype=np.uint64), 24)
        b = RingVec(np.array([2], dtype=np.uint64), 24)
        assert (a - b).words[0] == 2**64 - 1

    def test_sum_permutation_invariant(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(2, 8))
            dim = int(rng.integers(1, 50))
            vecs = [
                RingVec(rng.integers(0, 2**64, size=dim, dtype=np.uint64), 24)
                for _ in range(n)
            ]
            base = ring_sum(vecs).words
            perm = rng.permutation(n)
            assert np.array_equal(base, ring_sum([vecs[i] for i in perm]).words)

    def test_scale_mismatch_rejected(self):
        a = RingVec(np.array([1], dtype=np.uint64), 24)
        b = RingVec(np.array([1], dtype=np.uint64), 16)
        with pytest.raises(ValueError):
            a + b


class TestParamVec:
    def test_layout_count_checked(self):
        with pytest.raises(ValueError):
            ParamVec(np.zeros(3), (("a", (2, 2)),))

    def test_incompatible_layouts_not_combinable(self):
        a = ParamVec(np.zeros(4), (("a", (2, 2)),))
        b = ParamVec(np.zeros(4), (("b", (4,)),))
        with pytest.raises(ValueError):
            a + b

    def test_tensors_views(self):
        p = ParamVec(np.arange(6, dtype=np.float64), (("a", (2, 2)), ("b", (2,))))
        t = p.tensors()
        assert t["a"].shape == (2, 2)
        assert np.array_equal(t["b"], [4.0, 5.0])


class TestSeededRng:
    def test_same_seed_label_identical(self):
        a = derive_rng(1, "a").uniform(size=100)
        b = derive_rng(1, "a").uniform(size=100)
        assert np.array_equal(a, b)

    def test_labels_give_distinct_streams(self):
        a = derive_rng(1, "a").uniform(size=100)
        b = derive_rng(1, "b").uniform(size=100)
        assert not np.array_equal(a, b)

    def test_seeds_give_distinct_streams(self):
        a = derive_rng(1, "a").uniform(size=100)
        b = derive_rng(2, "a").uniform(size=100)
        assert not np.array_equal(a, b)

    def test_child_streams_differ_from_parent(self):
        parent = derive_rng(1, "p").uniform(size=10)
        child = derive_rng(1, "p").child("c").uniform(size=10)
        assert not np.array_equal(parent, child)

    def test_golden_draws_frozen(self):
        # recorded once; any change here breaks cross-run mask agreement
        expected = [
            0.5801154244796215, 0.32286361483617243, 0.5319567991082916,
            0.269879365022087, 0.004041087377546604, 0.14864498664575598,
            0.3817294916350934, 0.9401282410276819,
        ]
        got = derive_rng(42, "golden").uniform(size=8)
        assert np.array_equal(got, np.array(expected))

    def test_words_cover_full_ring_width(self):
        w = derive_rng(0, "w").words(4096)
        assert w.dtype == np.uint64
        # top bit must be set about half the time; a biased generator fails this
        top = (w >> np.uint64(63)).mean()
        assert 0.45 < top < 0.55
