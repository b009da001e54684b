"""Named, seeded random streams.

A stream is fully determined by ``(stream_id, seed)``: the id is hashed into the
``SeedSequence`` spawn key, so different ids give independent PCG64 states while
the same pair reproduces its draws on any platform.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _id_words(stream_id: str) -> tuple[int, ...]:
    digest = hashlib.sha256(stream_id.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


class RngStream:
    def __init__(self, stream_id: str, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.stream_id = stream_id
        self.seed = int(seed)
        self.counter = 0
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_id_words(stream_id))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"RngStream({self.stream_id!r}, seed={self.seed}, counter={self.counter})"

    def child(self, name: str) -> "RngStream":
        """Independent stream derived from this one's id; does not consume draws."""
        return RngStream(f"{self.stream_id}/{name}", self.seed)

    def _tick(self):
        self.counter += 1
        return self._gen

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._tick().normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self._tick().standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._tick().uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._tick().integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._tick().choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self._tick().permutation(x)

    def random(self, size=None):
        return self._tick().random(size)
