"""Counter-based, splittable random streams.

Every draw is a pure function of ``(seed, counter)``: the stream builds a
Philox generator at its current counter, draws, then advances the counter by
one. Replaying a stream from the same ``(seed, counter)`` reproduces its
draws, and :meth:`RngStream.split` derives independent child streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter) & _MASK64

    def generator(self) -> np.random.Generator:
        """A fresh generator for the next draw; advances the counter."""
        bits = np.random.Philox(key=self.seed, counter=self.counter)
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(bits)

    def split(self, *keys: int) -> "RngStream":
        """Independent child stream keyed by ``keys``; does not advance self."""
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, self.counter & 0xFFFFFFFF,
                                      self.counter >> 32, *[int(k) & 0xFFFFFFFF for k in keys]])
        return RngStream(int(seq.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator().uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator().integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator().normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)
