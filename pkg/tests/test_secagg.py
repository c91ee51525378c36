"""Non-zero-sum masking: worked examples, exactness, and blindness statistics."""

import numpy as np
import pytest
from scipy import stats

from fedgm.core import ParamVec, RingVec, decode_fixed, encode_fixed, ring_sum
from fedgm.secagg import (
    RoundMasks,
    aggregate_masked,
    gen_round_masks,
    mask_local,
    unmask_global,
)


def ring_one(value):
    return RingVec(np.array([value], dtype=np.uint64), scale_bits=24)


def hand_masks(values, round_=0):
    return RoundMasks(round=round_, masks=tuple(ring_one(v) for v in values))


def encode_scalar(x):
    return encode_fixed(ParamVec(np.array([x]), (("x", (1,)),)), 24)


class TestWorkedExample:
    """The N=3, masks {5, 7, 11} case, hand-computed in ring arithmetic."""

    def setup_method(self):
        self.rings = [encode_scalar(v) for v in (1.0, 2.0, 3.0)]
        self.rm = hand_masks([5, 7, 11])

    def test_plaintext_encoding(self):
        assert [int(r.words[0]) for r in self.rings] == [16777216, 33554432, 50331648]

    def test_masked_values(self):
        masked = [mask_local(self.rings[i], i + 1, self.rm) for i in range(3)]
        # silo 3 = 50331648 - (5+7) + 11
        assert [int(m.words.words[0]) for m in masked] == [16777221, 33554439, 50331647]

    def test_masked_sum(self):
        masked = [mask_local(self.rings[i], i + 1, self.rm) for i in range(3)]
        total = aggregate_masked(masked)
        assert int(total.words[0]) == 100663307  # (1+2+3)*2^24 + 11

    def test_unmask_gives_mean(self):
        masked = [mask_local(self.rings[i], i + 1, self.rm) for i in range(3)]
        total = aggregate_masked(masked)
        out = unmask_global(total, self.rm, 3)
        assert out.values[0] == 2.0


class TestMaskLocal:
    def test_zero_masks_are_identity(self):
        rm = hand_masks([0, 0, 0])
        ring = encode_scalar(1.5)
        masked = mask_local(ring, 2, rm)
        assert np.array_equal(masked.words.words, ring.words)

    def test_two_silo_formula(self):
        rm = hand_masks([9, 4])
        ring = encode_scalar(1.0)
        masked = mask_local(ring, 2, rm)
        assert int(masked.words.words[0]) == 16777216 - 9 + 4

    def test_index_bounds(self):
        rm = hand_masks([1, 2])
        with pytest.raises(ValueError):
            mask_local(encode_scalar(0.0), 3, rm)
        with pytest.raises(ValueError):
            mask_local(encode_scalar(0.0), 0, rm)


class TestGenRoundMasks:
    def test_identical_across_derivations(self):
        a = gen_round_masks(7, 3, 8, 32)
        b = gen_round_masks(7, 3, 8, 32)
        for ma, mb in zip(a.masks, b.masks):
            assert np.array_equal(ma.words, mb.words)

    def test_rounds_differ(self):
        a = gen_round_masks(7, 3, 4, 32)
        b = gen_round_masks(7, 4, 4, 32)
        assert not np.array_equal(a.masks[0].words, b.masks[0].words)

    def test_shapes(self):
        rm = gen_round_masks(1, 0, 5, 17)
        assert rm.n_silos == 5
        assert all(m.size == 17 for m in rm.masks)

    def test_needs_two_silos(self):
        with pytest.raises(ValueError):
            gen_round_masks(1, 0, 1, 4)


class TestAggregate:
    def test_identical_models_zero_masks(self):
        rm = hand_masks([0, 0, 0, 0])
        ring = encode_scalar(0.25)
        masked = [mask_local(ring, i + 1, rm) for i in range(4)]
        total = aggregate_masked(masked)
        assert int(total.words[0]) == 4 * int(ring.words[0])

    def test_order_invariant(self):
        rm = gen_round_masks(3, 0, 4, 8)
        padded = [
            encode_fixed(ParamVec(np.full(8, float(i + 1)), (("x", (8,)),)), 24)
            for i in range(4)
        ]
        masked = [mask_local(padded[i], i + 1, rm) for i in range(4)]
        a = aggregate_masked(masked)
        b = aggregate_masked(list(reversed(masked)))
        assert np.array_equal(a.words, b.words)

    def test_missing_silo_rejected(self):
        rm = hand_masks([1, 2, 3])
        masked = [mask_local(encode_scalar(1.0), i, rm) for i in (1, 2)]
        with pytest.raises(ValueError):
            aggregate_masked(masked, n_silos=3)

    def test_duplicate_silo_rejected(self):
        rm = hand_masks([1, 2])
        m1 = mask_local(encode_scalar(1.0), 1, rm)
        with pytest.raises(ValueError):
            aggregate_masked([m1, m1])

    def test_mixed_rounds_rejected(self):
        rm0 = hand_masks([1, 2], round_=0)
        rm1 = hand_masks([1, 2], round_=1)
        with pytest.raises(ValueError):
            aggregate_masked([
                mask_local(encode_scalar(1.0), 1, rm0),
                mask_local(encode_scalar(1.0), 2, rm1),
            ])


class TestExactness:
    def test_matches_plaintext_ring_mean_oracle(self):
        rng = np.random.default_rng(17)
        for trial in range(30):
            n = int(rng.choice([2, 4, 8, 16]))
            dim = int(rng.integers(1, 3000))
            models = [
                ParamVec(rng.uniform(-5, 5, size=dim), (("x", (dim,)),))
                for _ in range(n)
            ]
            rings = [encode_fixed(m, 24) for m in models]
            rm = gen_round_masks(99, trial, n, dim)
            masked = [mask_local(rings[i], i + 1, rm) for i in range(n)]
            out = unmask_global(aggregate_masked(masked), rm, n)
            oracle = decode_fixed(ring_sum(rings), divisor=n)
            assert np.array_equal(out.values, oracle.values)

    def test_n_identical_models(self):
        dim = 50
        model = ParamVec(np.linspace(-1, 1, dim), (("x", (dim,)),))
        ring = encode_fixed(model, 24)
        rm = gen_round_masks(5, 0, 8, dim)
        masked = [mask_local(ring, i + 1, rm) for i in range(8)]
        out = unmask_global(aggregate_masked(masked), rm, 8)
        assert np.array_equal(out.values, decode_fixed(ring, divisor=1).values)


class TestBlindness:
    def test_masked_words_uniform_over_rounds(self):
        # fixed model, fresh masks each round: low-order byte of the visible
        # word must be uniform; chi-square over 10^4 rounds
        ring = encode_scalar(1.2345)
        low_bytes = np.empty(10_000, dtype=np.uint64)
        for r in range(10_000):
            rm = gen_round_masks(11, r, 3, 1)
            masked = mask_local(ring, 1, rm)
            low_bytes[r] = masked.words.words[0] & np.uint64(0xFF)
        counts = np.bincount(low_bytes.astype(int), minlength=256)
        _, p = stats.chisquare(counts)
        assert p > 0.01

    def test_masked_sum_differs_from_true_sum(self):
        rings = [encode_scalar(v) for v in (1.0, 2.0)]
        rm = gen_round_masks(13, 0, 2, 1)
        assert int(rm.masks[-1].words[0]) != 0  # residual mask present
        masked = [mask_local(rings[i], i + 1, rm) for i in range(2)]
        total = aggregate_masked(masked)
        true_sum = ring_sum(rings)
        assert not np.array_equal(total.words, true_sum.words)
