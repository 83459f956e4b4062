"""Deterministic 64-bit PRNG (SplitMix64) used for all randomness in the package.

Determinism contract: the same seed yields the same stream within one
build of this library; cross-platform bit-equality of derived floats is
not promised.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = (z ^ (z >> 30)) * _MIX1 & _MASK
    z = (z ^ (z >> 27)) * _MIX2 & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys) -> int:
    """Fold integer or string keys into a seed to get an independent child seed.

    The seed is mixed before any key, and keys are domain-tagged by type
    and length, so (seed, keys) tuples that differ anywhere give different
    children: derive_seed(0, "b") != derive_seed(1, "a") and
    derive_seed(0, "ab") != derive_seed(0, "a", "b").
    """
    s = _mix(seed & _MASK)
    for key in keys:
        if isinstance(key, str):
            raw = key.encode()
            s = _mix((s + _GOLDEN + 1) & _MASK)
            for ch in raw:
                s = _mix((s + _GOLDEN + ch) & _MASK)
            s = _mix((s + _GOLDEN + len(raw)) & _MASK)
        else:
            s = _mix((s + _GOLDEN + 2) & _MASK)
            s = _mix((s + _GOLDEN + (int(key) & _MASK)) & _MASK)
    return s


class SplitMix64:
    """Sequential SplitMix64 generator with vectorized array fills.

    Scalar draws and array fills consume the same underlying u64 stream,
    so any interleaving of calls is reproducible from the seed alone.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = self.next_u64() >> 11  # 53 random bits
        return lo + (hi - lo) * (u * 2.0**-53)

    def randint(self, n: int) -> int:
        # Modulo bias is negligible for n << 2**64.
        return self.next_u64() % n

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def gauss(self, std: float = 1.0) -> float:
        # Box-Muller without caching the spare, to keep the stream simple.
        u1 = self.uniform()
        u2 = self.uniform()
        u1 = max(u1, 2.0**-53)
        return std * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def _next_block(self, n: int) -> np.ndarray:
        start = self._state
        with np.errstate(over="ignore"):
            z = (np.uint64(start) +
                 np.uint64(_GOLDEN) * np.arange(1, n + 1, dtype=np.uint64))
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self._state = (start + n * _GOLDEN) & _MASK
        return z

    def fill_uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        u = (self._next_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + (hi - lo) * u).reshape(shape)

    def fill_gauss(self, shape, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        u1 = np.maximum(self.fill_uniform(n), 2.0**-53)
        u2 = self.fill_uniform(n)
        g = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (std * g).reshape(shape)
