"""SplitMix64, the single PRNG used for data, augmentation, shuffling and init.

The generator is counter-based: the k-th output (k >= 1) of a stream seeded
with ``s`` is ``mix(s + k * GAMMA)``, so long runs of draws can be produced
with vectorised numpy arithmetic and stay bit-identical to the scalar path.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= np.uint64(_M1)
        z ^= z >> np.uint64(27)
        z *= np.uint64(_M2)
        z ^= z >> np.uint64(31)
    return z


def bounded(draws, lo: int, hi: int):
    """Map raw u64 draws to integers in ``[lo, hi]`` (inclusive) by modulo."""
    span = hi - lo + 1
    if isinstance(draws, np.ndarray):
        return (draws % np.uint64(span)).astype(np.int64) + lo
    return lo + draws % span


def unit_float(draws):
    """Map raw u64 draws to floats in ``[0, 1)`` using the top 53 bits."""
    if isinstance(draws, np.ndarray):
        return (draws >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return (draws >> 11) * 2.0**-53


class SplitMix64:
    """Stateful SplitMix64 stream with a draw counter."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64
        self.draws = 0

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        self.draws += 1
        return mix64(self.state)

    def take(self, n: int) -> np.ndarray:
        """Next ``n`` outputs as a uint64 array, advancing the stream."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + k * np.uint64(GAMMA)
        self.state = (self.state + n * GAMMA) & MASK64
        self.draws += n
        return mix64_array(states)

    def randint(self, lo: int, hi: int) -> int:
        return bounded(self.next_u64(), lo, hi)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * unit_float(self.next_u64())


def stream_block(seeds: np.ndarray, n: int) -> np.ndarray:
    """Outputs 1..n of many independent streams at once, shape ``[len(seeds), n]``."""
    seeds = np.asarray(seeds, dtype=np.uint64)
    k = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        states = seeds[:, None] + k[None, :] * np.uint64(GAMMA)
    return mix64_array(states)
