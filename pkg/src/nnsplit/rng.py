"""SplitMix64 weight generator.

The sequence is the standard SplitMix64 mixer::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z = z ^ (z >> 31)

all arithmetic modulo 2**64.  A 64-bit output ``z`` maps to a uniform double
in [0, 1) as ``(z >> 11) * 2**-53``, and to a weight in [-0.1, 0.1) as
``-0.1 + 0.2 * u``.  One stream is drawn per model, consumed layer by layer in
ascending layer id, row-major within each weight array, bias after weights.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1

WEIGHT_LOW = -0.1
WEIGHT_HIGH = 0.1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def u64_array(self, n: int) -> np.ndarray:
        # Vectorised: state_i = state_0 + (i + 1) * GOLDEN, uint64 wraps mod 2**64.
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN)
            z = np.uint64(self.state) + steps
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN) & MASK64
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def weights(self, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return (WEIGHT_LOW + (WEIGHT_HIGH - WEIGHT_LOW) * self.uniform(n)).reshape(shape)
