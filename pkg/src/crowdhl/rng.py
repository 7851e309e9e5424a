"""SplitMix64 pseudo-random generator.

Every random draw in the package (weight init, shuffling, dropout masks,
synthetic data) comes from this generator so that streams are reproducible
bit-for-bit from a seed, independent of numpy's generator versions.

Algorithm (all arithmetic modulo 2**64)::

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

The n-th output (1-based) of a generator seeded with ``s`` is therefore
``mix(s + n * GAMMA)``, which lets blocks of draws be produced vectorized.

Derived values:

* uniform float in [0, 1): ``(u >> 11) * 2**-53``
* standard normal: Box-Muller on two consecutive uniforms ``u1, u2``,
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
* ``split()``: the next raw output becomes the seed of a child generator.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied element-wise to a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int) -> None:
        self.state = int(seed) & _MASK

    def next_u64(self, n: int | None = None):
        """Return one raw 64-bit output (int) or an array of ``n`` of them."""
        if n is None:
            self.state = (self.state + GAMMA) & _MASK
            return int(mix64(np.uint64(self.state)))
        n = int(n)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
        self.state = (self.state + n * GAMMA) & _MASK
        return mix64(z)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 draws in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_range(self, low: float, high: float, n: int) -> np.ndarray:
        return low + (high - low) * self.uniform(n)

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal draws (consumes ``2 * n`` raw outputs)."""
        u = self.uniform(2 * n).reshape(n, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return r * np.cos(2.0 * np.pi * u[:, 1])

    def randbelow(self, n: int) -> int:
        return int(self.uniform(1)[0] * n)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``; position ``i`` swaps with ``floor(u * (i + 1))``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def split(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())
