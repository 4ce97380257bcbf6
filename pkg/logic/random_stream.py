"""Buffered random streams and replica-indexed seeding.

Every replica owns its own ``SeedSequence`` derived from ``(seed, *keys, replica)``,
so a replica draws the same numbers whichever worker runs it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class RandomStream:
    """Scalar draws served from pre-generated blocks"""

    def __init__(self, generator: np.random.Generator, block: int = 256):
        self.generator = generator
        self._block = block
        self._exp = np.empty(0)
        self._exp_pos = 0
        self._uni = np.empty(0)
        self._uni_pos = 0
        self._nrm = np.empty(0)
        self._nrm_pos = 0

    @classmethod
    def from_seed(cls, seed) -> RandomStream:
        return cls(np.random.default_rng(seed))

    def standard_exponential(self) -> float:
        if self._exp_pos >= len(self._exp):
            self._exp = self.generator.standard_exponential(self._block)
            self._exp_pos = 0
        value = self._exp[self._exp_pos]
        self._exp_pos += 1
        return float(value)

    def exponential(self, rate: float) -> float:
        """Exponential time with the given rate; inf for a null rate"""
        e = self.standard_exponential()
        return e / rate if rate > 0 else float("inf")

    def uniform(self) -> float:
        if self._uni_pos >= len(self._uni):
            self._uni = self.generator.random(self._block)
            self._uni_pos = 0
        value = self._uni[self._uni_pos]
        self._uni_pos += 1
        return float(value)

    def normal(self) -> float:
        if self._nrm_pos >= len(self._nrm):
            self._nrm = self.generator.standard_normal(self._block)
            self._nrm_pos = 0
        value = self._nrm[self._nrm_pos]
        self._nrm_pos += 1
        return float(value)

    def pick(self, cdf: np.ndarray) -> int:
        """Index drawn from a cumulative distribution"""
        return int(np.searchsorted(cdf, self.uniform() * cdf[-1], side="right"))

    def geometric_failures(self, success: float) -> int:
        """Number of failures before the first success"""
        return int(self.generator.geometric(success)) - 1


@dataclass
class ReplicaStreams:
    """Independent streams for each driving process of one replica"""
    arrivals: RandomStream
    services: RandomStream
    marks: RandomStream
    dominating: RandomStream
    environment: RandomStream

    @classmethod
    def from_seed_sequence(cls, seq: np.random.SeedSequence) -> ReplicaStreams:
        children = seq.spawn(5)
        return cls(*(RandomStream(np.random.default_rng(c)) for c in children))

    @classmethod
    def from_seed(cls, seed: int, replica: int = 0, keys: Sequence[int] = ()) -> ReplicaStreams:
        return cls.from_seed_sequence(replica_seed(seed, replica, keys))


def replica_seed(seed: int, replica: int, keys: Sequence[int] = ()) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(*keys, replica))
