"""Counter-based SplitMix64 generator.

Every random draw in the package goes through :class:`SplitMix64` so that a
seed reproduces the same stream on any platform, independent of the numpy
version.  Values are produced in vectorised blocks: output ``i`` (1-based) of
a stream with seed ``s`` is ``mix(s + i * GOLDEN)``, which is exactly the
sequence of the reference sequential SplitMix64.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Seeded stream of 64-bit words with a few derived distributions."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        """Return the next ``n`` raw 64-bit outputs."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * GOLDEN)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws on ``[low, high)`` with 53 bits of resolution."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        # Box-Muller on paired uniforms; 1 - u keeps the log argument in (0, 1].
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return std * z[:n].reshape(shape)

    def signs(self, size) -> np.ndarray:
        """Rademacher variables: +1 or -1 with equal probability (top bit)."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        bits = (self.next_u64(n) >> np.uint64(63)).astype(np.float64)
        return (2.0 * bits - 1.0).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")

    def spawn(self, key: int) -> "SplitMix64":
        """Independent child stream; depends only on the seed and ``key``."""
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) ^ (np.uint64(int(key) & _MASK) * _M2)
            child = _mix(np.array([z + GOLDEN], dtype=np.uint64))[0]
        return SplitMix64(int(child))
