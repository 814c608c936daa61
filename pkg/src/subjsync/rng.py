"""SplitMix64 streams.

SplitMix64 is counter based: output k only depends on ``state + k * GOLDEN``,
so blocks of draws are generated with vectorized uint64 arithmetic and the
result is identical to drawing them one by one.
"""
from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1

# Purpose tags XOR-ed into the run seed; one independent stream per purpose.
PURPOSE_TAGS = {
    "weights": 0x57E1_6B75_0000_0001,
    "scene": 0x5CE7_E000_0000_0002,
    "dropout": 0xD209_0117_0000_0003,
}


def splitmix64_scalar(state: int) -> tuple[int, int]:
    """Reference one-step SplitMix64: returns (new_state, output)."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    @classmethod
    def for_purpose(cls, seed: int, purpose: str) -> "SplitMix64":
        return cls((int(seed) & MASK64) ^ PURPOSE_TAGS[purpose])

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("n must be non-negative")
        counters = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + counters * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN) & MASK64
        return z

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        """Doubles in [low, high) from the top 53 bits of each draw."""
        shape = () if size is None else (size if isinstance(size, tuple) else (size,))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = low + (high - low) * u
        if size is None:
            return float(out[0])
        return out.reshape(shape)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high); uses floor(u * span) on 53-bit uniforms."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(size)
        span = high - low
        out = low + np.minimum(np.floor(np.asarray(u) * span), span - 1).astype(np.int64)
        if size is None:
            return int(out)
        return out
