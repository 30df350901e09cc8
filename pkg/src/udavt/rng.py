"""Seeded, splittable random streams.

All randomness in the package goes through :class:`Rng`, a thin wrapper over
numpy's PCG64 bit generator. Child streams are derived from a name, so adding
a new consumer never shifts the numbers an existing consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np


class Rng:
    algorithm = "PCG64"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def split(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (zlib.crc32(name.encode("utf-8")),))

    def normal(self, size, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self.gen.standard_normal(size) * std).astype(dtype)

    def trunc_normal(self, size, std: float = 0.02, bound: float = 2.0, dtype=np.float64) -> np.ndarray:
        """Normal(0, std) truncated to +-bound*std by resampling."""
        out = self.gen.standard_normal(size)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)
