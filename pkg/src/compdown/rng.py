"""Seeded, independent random streams.

One master seed fans out into numbered streams (one per realization), so a
realization can be regenerated on its own, in any order, on any thread.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0

    def generator(self, *subkey: int) -> np.random.Generator:
        """A fresh generator for this stream; ``subkey`` selects a sub-stream."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream),) + tuple(int(k) for k in subkey))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return np.random.default_rng(rng)
