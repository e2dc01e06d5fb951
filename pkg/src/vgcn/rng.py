"""Seeded random streams that split deterministically.

A stream is identified by its root seed plus a path of split indices, so
``RandomStream(7).split(3)`` draws the same numbers no matter which thread
or process creates it.  That is what lets Monte Carlo passes run batched,
serially or in parallel with identical results.
"""

from __future__ import annotations

import numpy as np


class RandomStream:
    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(seq))
        self.counter = 0

    def split(self, index: int) -> "RandomStream":
        return RandomStream(self.seed, self.path + (index,))

    def normal(self, shape) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        self.counter += out.size
        return out

    def uniform(self, low=0.0, high=1.0, shape=None):
        out = self._gen.uniform(low, high, shape)
        self.counter += int(np.size(out))
        return out

    def integers(self, low, high=None, shape=None):
        out = self._gen.integers(low, high, shape)
        self.counter += int(np.size(out))
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._gen.permutation(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, path={self.path}, counter={self.counter})"


class StackedStream:
    """Draws each leading-axis row of a batch from its own stream.

    Row ``i`` of ``normal((B, ...))`` comes from ``streams[i]``, so running
    ``B`` stochastic forwards as one batch reproduces ``B`` separate runs.
    """

    def __init__(self, streams):
        self.streams = list(streams)

    def normal(self, shape) -> np.ndarray:
        shape = tuple(shape)
        if not shape or shape[0] != len(self.streams):
            raise ValueError(f"leading dimension of {shape} does not match {len(self.streams)} streams")
        return np.stack([s.normal(shape[1:]) for s in self.streams])

    def split(self, index: int) -> "StackedStream":
        return StackedStream(s.split(index) for s in self.streams)


def as_stream(rng) -> RandomStream | StackedStream:
    if rng is None:
        raise ValueError("a random stream is required for stochastic layers")
    if isinstance(rng, (RandomStream, StackedStream)):
        return rng
    return RandomStream(int(rng))
