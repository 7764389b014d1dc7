"""SplitMix64: the single seeded random stream used for init, patches and synthesis.

The algorithm is pinned (Steele, Lea & Flood's mixer with the golden-gamma
increment) so that a seed produces the same bits on every platform.
Floats take the top 53 bits; normals use Box-Muller on pairs of uniforms.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MASK = (1 << 64) - 1

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK

    def next_u64(self) -> int:
        return int(self.u64(1)[0])

    def u64(self, n: int) -> np.ndarray:
        """The next ``n`` outputs of the stream as uint64."""
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(GOLDEN)
            out = _mix(z)
        self.state = (self.state + n * GOLDEN) & MASK
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1)."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in [0, high) by multiply-shift on the top 32 bits."""
        if high < 1:
            raise ValueError(f"integers: high must be >= 1, got {high}")
        top = (self.u64(n) >> np.uint64(32)).astype(np.uint64)
        return ((top * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def fork(self) -> "SplitMix64":
        """An independent child stream seeded from this one."""
        return SplitMix64(self.next_u64())
