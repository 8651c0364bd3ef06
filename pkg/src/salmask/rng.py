"""Deterministic splittable random streams.

Every stream is fully determined by a ``(seed, stream)`` pair of 64-bit
integers feeding a counter-based Philox generator, so identical pairs
reproduce identical sequences on every platform. Streams are never shared:
parallel or per-image work derives child streams with ``fold_in``/``split``,
which makes sampling order-independent across workers.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class Rng:
    """A single random stream keyed by (seed, stream).

    Drawing mutates internal state, so a given Rng instance must stay
    owned by one consumer; hand child streams to parallel work instead.
    """

    __slots__ = ("seed", "stream", "_gen")

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    # -- derivation ----------------------------------------------------

    def fold_in(self, n: int) -> "Rng":
        """Fresh child stream for tag ``n``; does not consume this stream."""
        child = _splitmix64(self.stream ^ _splitmix64(int(n) & _MASK64))
        return Rng(self.seed, child)

    def split(self, k: int) -> list["Rng"]:
        """``k`` pairwise-distinct child streams."""
        if k < 0:
            raise ValueError(f"split count must be >= 0, got {k}")
        return [self.fold_in(i) for i in range(k)]

    # -- draws ---------------------------------------------------------

    def uniform(self, lo: float, hi: float) -> float:
        """One draw from U[lo, hi); degenerate lo == hi returns lo."""
        if lo > hi:
            raise ValueError(f"uniform bounds reversed: lo={lo} > hi={hi}")
        if lo == hi:
            return float(lo)
        return float(self._gen.uniform(lo, hi))

    def random(self) -> float:
        return float(self._gen.random())

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError(f"integer bound must be positive, got {n}")
        return int(self._gen.integers(0, n))

    def normal(self, std: float, shape) -> np.ndarray:
        """N(0, std^2) samples as float32."""
        return self._gen.normal(0.0, std, size=shape).astype(np.float32)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def sample_without_replacement(self, population: int, k: int) -> np.ndarray:
        """``k`` distinct indices from [0, population), sorted ascending.

        Every k-subset is equiprobable.
        """
        if k < 0 or k > population:
            raise ValueError(
                f"cannot sample {k} without replacement from {population}")
        if k == 0:
            return np.empty(0, dtype=np.int64)
        out = self._gen.choice(population, size=k, replace=False)
        return np.sort(out.astype(np.int64))
