"""Seedable, splittable random number generation (xoshiro256**).

Every stochastic piece of the toolkit (weight init, episode sampling, the
synthetic dataset) draws from this generator so that runs are reproducible
at the level of the raw bit sequence, independent of numpy's own RNG.
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(state: int) -> tuple[int, int]:
    """One step of splitmix64; returns (output, next_state)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)), state


class Rng:
    """xoshiro256** generator seeded through splitmix64.

    The four 64-bit state words are filled from consecutive splitmix64
    outputs of the seed, which is the seeding procedure recommended by the
    algorithm's authors.  `split(stream)` derives an independent generator
    from (seed, stream), used to give e.g. every evaluation episode its own
    stream so serial and parallel runs agree.
    """

    __slots__ = ("_s0", "_s1", "_s2", "_s3", "seed")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        state = self.seed
        self._s0, state = _splitmix64(state)
        self._s1, state = _splitmix64(state)
        self._s2, state = _splitmix64(state)
        self._s3, state = _splitmix64(state)

    def split(self, stream: int) -> "Rng":
        """Derive an independent generator for (this seed, stream id)."""
        mix, _ = _splitmix64((stream & _MASK64) ^ _GOLDEN)
        return Rng(self.seed ^ mix)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        x = (s1 * 5) & _MASK64
        result = (((x << 7) | (x >> 57)) & _MASK64) * 9 & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def next_double(self) -> float:
        # 53 high bits -> double in [0, 1)
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float, shape=None) -> "float | np.ndarray":
        """Uniform draw(s) in [lo, hi); returns a scalar when shape is None."""
        if shape is None:
            return lo + (hi - lo) * self.next_double()
        n = int(np.prod(shape)) if shape != () else 1
        out = self._doubles(n)
        return (lo + (hi - lo) * out).reshape(shape)

    def _doubles(self, n: int) -> np.ndarray:
        # Tight loop; this is the hot path for weight init and pixel noise.
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        mask = _MASK64
        inv = 1.0 / (1 << 53)
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            x = (s1 * 5) & mask
            r = (((x << 7) | (x >> 57)) & mask) * 9 & mask
            t = (s1 << 17) & mask
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & mask
            out[i] = (r >> 11) * inv
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return out

    def normal(self, shape=None) -> "float | np.ndarray":
        """Standard normal draw(s) via Box-Muller; scalar when shape is None."""
        if shape is None:
            return float(self.normal((1,))[0])
        n = int(np.prod(shape)) if shape != () else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self._doubles(pairs)  # (0, 1]: keeps the log finite
        u2 = self._doubles(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias (rejection)."""
        if n <= 0:
            raise ValueError(f"randint upper bound must be positive, got {n}")
        limit = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), uniform, by partial Fisher-Yates."""
        if k > n:
            raise ValueError(f"cannot choose {k} distinct items from {n}")
        pool = np.arange(n)
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()

    def permutation(self, n: int) -> np.ndarray:
        return self.choice(n, n)
