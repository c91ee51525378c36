"""Deterministic randomness, parameter containers, and the fixed-point ring codec.

Everything that must agree bit-for-bit across silos lives here: a splittable
counter-based RNG keyed by (seed, label), flat parameter vectors with layout
metadata, and an exact fixed-point encoding over the 2^64 ring.  Mask
cancellation in the aggregation protocol relies on ring addition being
associative and commutative without rounding, which floating point cannot
provide; hence the integer ring.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

RING_BITS = 64
RING_MOD = 1 << RING_BITS
DEFAULT_SCALE_BITS = 24

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class FixedPointOverflowError(OverflowError):
    """A value falls outside the representable fixed-point range."""


def _philox_key(seed: int, label: str) -> np.ndarray:
    """Derive a 128-bit Philox key from (seed, label) via blake2b."""
    digest = hashlib.blake2b(f"{seed}:{label}".encode("utf-8"), digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64)


class SeededRng:
    """Deterministic random stream identified by (seed, label).

    The underlying generator is counter-based (Philox), so every party that
    derives the same (seed, label) obtains the same stream regardless of how
    many other streams it has consumed.  Draw methods advance the stream;
    the identity (seed, label) never changes.
    """

    def __init__(self, seed: int, label: str):
        self.seed = int(seed)
        self.label = str(label)
        self.gen = np.random.Generator(np.random.Philox(key=_philox_key(seed, label)))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, label={self.label!r})"

    def child(self, suffix: str) -> "SeededRng":
        """Split off an independent stream; label becomes `label/suffix`."""
        return SeededRng(self.seed, f"{self.label}/{suffix}")

    # Thin delegations so call sites read like plain numpy.
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def shuffle(self, seq: list) -> None:
        self.gen.shuffle(seq)

    def dirichlet(self, alpha) -> np.ndarray:
        return self.gen.dirichlet(alpha)

    def multinomial(self, n, pvals) -> np.ndarray:
        return self.gen.multinomial(n, pvals)

    def words(self, n: int) -> np.ndarray:
        """n uniform elements of the 2^64 ring."""
        return self.gen.integers(0, RING_MOD, size=n, dtype=np.uint64)


def derive_rng(seed: int, label: str) -> SeededRng:
    """Independent deterministic stream per (seed, label)."""
    return SeededRng(seed, label)


def _layout_size(layout: Layout) -> int:
    return int(sum(int(np.prod(shape, dtype=np.int64)) for _, shape in layout))


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ParamVec:
    """Flat float64 parameter vector plus the (layer-name, shape) layout.

    Two ParamVecs may be combined (added, averaged) only when their layouts
    are identical; the layout is the unit of agreement between silos.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = _freeze(np.asarray(self.values, dtype=np.float64).ravel())
        object.__setattr__(self, "values", values)
        layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        object.__setattr__(self, "layout", layout)
        if values.size != _layout_size(layout):
            raise ValueError(
                f"layout describes {_layout_size(layout)} elements, "
                f"got {values.size} values"
            )

    @property
    def size(self) -> int:
        return int(self.values.size)

    def tensors(self) -> dict[str, np.ndarray]:
        """Read-only views of the flat vector, one per layout entry."""
        out = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape, dtype=np.int64))
            out[name] = self.values[offset:offset + n].reshape(shape)
            offset += n
        return out

    def with_values(self, values: np.ndarray) -> "ParamVec":
        return ParamVec(values, self.layout)

    def check_combinable(self, other: "ParamVec") -> None:
        if self.layout != other.layout:
            raise ValueError("ParamVecs with different layouts are not combinable")

    def __add__(self, other: "ParamVec") -> "ParamVec":
        self.check_combinable(other)
        return ParamVec(self.values + other.values, self.layout)

    def __sub__(self, other: "ParamVec") -> "ParamVec":
        self.check_combinable(other)
        return ParamVec(self.values - other.values, self.layout)

    def scaled(self, a: float) -> "ParamVec":
        return ParamVec(self.values * a, self.layout)


def zeros_like(p: ParamVec) -> ParamVec:
    return ParamVec(np.zeros(p.size), p.layout)


def flatten_tensors(tensors: dict[str, np.ndarray], layout: Layout) -> ParamVec:
    parts = [np.asarray(tensors[name], dtype=np.float64).ravel() for name, _ in layout]
    return ParamVec(np.concatenate(parts) if parts else np.zeros(0), layout)


@dataclass(frozen=True)
class RingVec:
    """Vector over the 2^64 ring with a fixed-point scale.

    Addition and subtraction wrap modulo 2^64, so sums are bit-exact under
    any permutation of operands; this is what makes mask cancellation exact.
    `layout` is carried along when the words encode model parameters and is
    None for structureless vectors such as masks.
    """

    words: np.ndarray
    scale_bits: int = DEFAULT_SCALE_BITS
    layout: Layout | None = None

    def __post_init__(self):
        words = _freeze(np.asarray(self.words, dtype=np.uint64).ravel())
        object.__setattr__(self, "words", words)
        if self.layout is not None:
            layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
            object.__setattr__(self, "layout", layout)
            if words.size != _layout_size(layout):
                raise ValueError("layout does not match word count")

    @property
    def size(self) -> int:
        return int(self.words.size)

    def _check(self, other: "RingVec") -> Layout | None:
        if self.size != other.size:
            raise ValueError("RingVec size mismatch")
        if self.scale_bits != other.scale_bits:
            raise ValueError("RingVec scale_bits mismatch")
        if self.layout is not None and other.layout is not None and self.layout != other.layout:
            raise ValueError("RingVec layout mismatch")
        return self.layout if self.layout is not None else other.layout

    def __add__(self, other: "RingVec") -> "RingVec":
        layout = self._check(other)
        return RingVec(self.words + other.words, self.scale_bits, layout)

    def __sub__(self, other: "RingVec") -> "RingVec":
        layout = self._check(other)
        return RingVec(self.words - other.words, self.scale_bits, layout)


def ring_sum(vecs: list[RingVec]) -> RingVec:
    if not vecs:
        raise ValueError("ring_sum of empty list")
    acc = vecs[0]
    for v in vecs[1:]:
        acc = acc + v
    return acc


def encode_fixed(p: ParamVec, scale_bits: int = DEFAULT_SCALE_BITS) -> RingVec:
    """Encode reals as round(x * 2^scale_bits), two's complement in the ring.

    Valid for |x| < 2^(63 - scale_bits); anything larger cannot be represented
    without aliasing and raises.
    """
    if not 8 <= scale_bits <= 40:
        raise ValueError(f"scale_bits must be in [8, 40], got {scale_bits}")
    bound = float(2 ** (63 - scale_bits))
    bad = ~np.isfinite(p.values) | (np.abs(p.values) >= bound)
    if bad.any():
        i = int(np.argmax(bad))
        raise FixedPointOverflowError(
            f"value {p.values[i]} at index {i} outside (-{bound}, {bound}) "
            f"for scale_bits={scale_bits}"
        )
    scaled = np.round(p.values * float(1 << scale_bits)).astype(np.int64)
    return RingVec(scaled.view(np.uint64), scale_bits, p.layout)


def decode_fixed(r: RingVec, divisor: int = 1) -> ParamVec:
    """Interpret words as signed ring elements and divide by 2^scale_bits * divisor.

    The divisor carries the averaging step of aggregation: dividing once here,
    in real arithmetic, avoids non-exact division inside the ring.
    """
    if divisor < 1:
        raise ValueError("divisor must be >= 1")
    signed = r.words.view(np.int64).astype(np.float64)
    values = signed / (float(1 << r.scale_bits) * divisor)
    layout = r.layout if r.layout is not None else (("flat", (r.size,)),)
    return ParamVec(values, layout)
