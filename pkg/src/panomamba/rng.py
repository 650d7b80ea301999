"""Named, seedable, splittable pseudo-random generator.

Children are derived from (root seed, path of names), so any draw in the
system is reproducible from the run seed alone; resuming a job re-derives the
same streams without serializing generator state.
"""

from __future__ import annotations

import zlib

import numpy as np


class Rng:
    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self.path = tuple(_path)
        entropy = [self.seed & 0xFFFFFFFF] + [
            zlib.crc32(str(p).encode("utf-8")) for p in self.path
        ]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def split(self, name):
        """Deterministic child stream; independent of draws made so far."""
        return Rng(self.seed, self.path + (name,))

    def normal(self, size=None):
        return self._gen.normal(size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size=size)

    def choice(self, n):
        return int(self._gen.integers(0, n))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(map(str, self.path)) or '.'})"
