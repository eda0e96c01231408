"""Counter-based deterministic random streams.

All seed-reconstructible parameters are generated here, so the server and any
client holding the same 64-bit master seed regenerate identical bytes.
SplitMix64 is counter-based (output ``i`` is ``mix(seed + (i + 1) * GAMMA)``),
which lets us draw a whole block in one vectorized numpy pass.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64_mix(x: int) -> int:
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def splitmix64(x: int) -> int:
    """One SplitMix64 step from state ``x``: advance by the golden gamma, then mix."""
    return splitmix64_mix(x + GOLDEN_GAMMA)


def fnv1a_64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def stream_seed(master_seed: int, name: str) -> int:
    return splitmix64((master_seed & MASK64) ^ fnv1a_64(name))


def derive_seed(*parts: int | str) -> int:
    """Hash an ordered tuple of ints/strings into a 64-bit seed."""
    h = 0
    for part in parts:
        v = fnv1a_64(part) if isinstance(part, str) else int(part) & MASK64
        h = splitmix64(h ^ v)
    return h


def splitmix64_stream(seed: int, count: int, start: int = 0) -> np.ndarray:
    """Outputs ``start .. start+count-1`` of the SplitMix64 sequence seeded with ``seed``."""
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = np.uint64(seed & MASK64) + counters * np.uint64(GOLDEN_GAMMA)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return x


def _unit_open(bits: np.ndarray) -> np.ndarray:
    # top 53 bits -> [0, 1)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def standard_normal(seed: int, count: int) -> np.ndarray:
    """Box-Muller over consecutive uniform pairs; returns float64.

    Pair ``k`` consumes outputs ``2k`` (radius) and ``2k+1`` (angle) and yields
    the cosine value then the sine value.
    """
    n_pairs = (count + 1) // 2
    bits = splitmix64_stream(seed, 2 * n_pairs)
    u1 = 1.0 - _unit_open(bits[0::2])  # (0, 1], keeps log finite
    u2 = _unit_open(bits[1::2])
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u2
    out = np.empty(2 * n_pairs, dtype=np.float64)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:count]


def seeded_gaussian_block(
    master_seed: int,
    block_name: str,
    shape: Sequence[int],
    stddev: float,
    dtype=np.float32,
) -> np.ndarray:
    """Deterministic N(0, stddev^2) block keyed by ``(master_seed, block_name)``."""
    if not stddev > 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    shape = tuple(int(s) for s in shape)
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    values = standard_normal(stream_seed(master_seed, block_name), count) * stddev
    return values.astype(dtype).reshape(shape)


class SplitMix64:
    """Small sequential generator for control decisions (client sampling, seeds)."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return splitmix64_mix(self.state)

    def randbelow(self, n: int) -> int:
        """Unbiased integer in ``[0, n)`` via rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def sample(self, population: Sequence, k: int) -> list:
        """Uniform sample without replacement (partial Fisher-Yates)."""
        pool = list(population)
        if not 0 <= k <= len(pool):
            raise ValueError(f"cannot sample {k} from population of {len(pool)}")
        for i in range(k):
            j = i + self.randbelow(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]
