"""Seeded counter-based random streams.

All stochastic operations draw from a ``Rng`` built on numpy's Philox bit
generator. Independent substreams are keyed by integers (epoch, batch index,
...), so results never depend on scheduling.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self.gen = np.random.Generator(np.random.Philox(seq))

    def substream(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def beta(self, a, b, size=None):
        return self.gen.beta(a, b, size)

    def random(self, size=None):
        return self.gen.random(size)
