"""Portable seeded random number generation.

All randomness in the engine flows through SplitMix64 so that weight
initialization and planted traces can be reproduced bit-for-bit in any
language. The generator is fully specified by three 64-bit constants:

    state = (state + 0x9E3779B97F4A7C15) mod 2^64
    z = state
    z = ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z = ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    output = z XOR (z >> 31)

Doubles are drawn as (output >> 11) * 2^-53, uniform in [0, 1).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_DOUBLE_SCALE = 2.0 ** -53


class SplitMix64:
    """Sequential SplitMix64 stream over a 64-bit state."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_double(self) -> float:
        return (self.next_u64() >> 11) * _DOUBLE_SCALE

    def uniform(self, shape) -> np.ndarray:
        """Array of doubles in [0, 1), filled in C (row-major) order."""
        n = int(np.prod(shape))
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.next_double()
        return out.reshape(shape)

    def symmetric(self, shape, scale: float = 1.0) -> np.ndarray:
        """Array of doubles in [-scale, scale), filled in C order."""
        return (2.0 * self.uniform(shape) - 1.0) * scale
