"""Non-zero-sum masking secure aggregation over the 2^64 ring.

Every silo derives the same N random mask vectors R_1..R_N per round from the
shared seed.  Silo i < N submits model + R_i; silo N submits
model - sum(R_1..R_{N-1}) + R_N.  The masked sum the aggregator computes is
therefore sum(models) + R_N: the additive masks cancel exactly in the ring
except the final one, so the aggregator sees neither any local model nor the
true global model.  Silos subtract R_N themselves and divide by N while
decoding, recovering the exact ring-mean.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import RingVec, derive_rng, ring_sum


@dataclass(frozen=True)
class RoundMasks:
    """The N per-silo mask vectors for one round; identical on every silo."""

    round: int
    masks: tuple[RingVec, ...]

    @property
    def n_silos(self) -> int:
        return len(self.masks)


@dataclass(frozen=True)
class MaskedModel:
    """Aggregator-visible artifact: ring words only, no plaintext parameters."""

    silo: int  # 1-based index
    round: int
    words: RingVec


def gen_round_masks(
    seed: int, round: int, n_silos: int, dim: int, scale_bits: int = 24
) -> RoundMasks:
    """Masks drawn uniformly over the ring, fresh per round.

    Stream labels are `masks/r=<round>/i=<i>`, so any silo can derive the
    identical set without coordination.
    """
    if n_silos < 2:
        raise ValueError("masking needs at least 2 silos")
    masks = tuple(
        RingVec(derive_rng(seed, f"masks/r={round}/i={i}").words(dim), scale_bits)
        for i in range(1, n_silos + 1)
    )
    return RoundMasks(round=round, masks=masks)


def mask_local(model: RingVec, silo_index: int, rm: RoundMasks) -> MaskedModel:
    """Apply silo i's mask: + R_i for i < N; - sum(R_1..R_{N-1}) + R_N for i = N."""
    n = rm.n_silos
    if not 1 <= silo_index <= n:
        raise ValueError(f"silo index {silo_index} out of range 1..{n}")
    if silo_index < n:
        words = model + rm.masks[silo_index - 1]
    else:
        words = model - ring_sum(list(rm.masks[:-1])) + rm.masks[-1]
    return MaskedModel(silo=silo_index, round=rm.round, words=words)


def aggregate_masked(
    submissions: list[MaskedModel], n_silos: int | None = None
) -> RingVec:
    """Ring-sum the N masked models; the result equals sum(models) + R_N.

    Requires exactly one submission per silo index and a single round; the
    averaging division is deferred to unmasking so it happens exactly once,
    in real arithmetic.  Pass `n_silos` to also reject missing submissions.
    """
    if not submissions:
        raise ValueError("no submissions")
    rounds = {s.round for s in submissions}
    if len(rounds) != 1:
        raise ValueError(f"submissions span multiple rounds: {sorted(rounds)}")
    expected = len(submissions) if n_silos is None else n_silos
    silos = sorted(s.silo for s in submissions)
    if silos != list(range(1, expected + 1)):
        raise ValueError(f"need one submission per silo 1..{expected}, got silos {silos}")
    ordered = sorted(submissions, key=lambda s: s.silo)
    return ring_sum([s.words for s in ordered])


def unmask_global(masked_sum: RingVec, rm: RoundMasks, n_silos: int):
    """Remove the residual mask R_N, then decode with divisor N.

    Returns the exact average of the encoded local models; the only rounding
    in the whole pipeline is the fixed-point quantization at encode time.
    """
    from .core import decode_fixed

    if n_silos != rm.n_silos:
        raise ValueError("n_silos disagrees with the mask set")
    return decode_fixed(masked_sum - rm.masks[-1], divisor=n_silos)
