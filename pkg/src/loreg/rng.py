"""Deterministic random streams built on the counter-based Philox generator.

Every stochastic component takes an RngStream instead of touching global
numpy state, so a run is reproducible from a single seed and independent
sub-streams can be derived for workers, stages, and probes.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngStream:
    """A named, forkable random stream.

    Identical (seed, key) pairs produce identical draw sequences on every
    platform; Philox is counter-based so streams never overlap.
    """

    def __init__(self, seed: int, key: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = int(key) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.Philox(key=[self.seed, self.key]))

    def child(self, tag: str) -> "RngStream":
        """Derive an independent stream; same (parent, tag) -> same stream."""
        digest = hashlib.sha256(f"{self.key}/{tag}".encode()).digest()
        return RngStream(self.seed, int.from_bytes(digest[:8], "big"))

    def normal(self, shape=None, std: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, std, size=shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def glorot(self, shape: tuple, fan_in: int | None = None, fan_out: int | None = None) -> np.ndarray:
        """Glorot-uniform draw; fans default to the trailing two dims."""
        if fan_in is None:
            fan_in = shape[0] if len(shape) > 1 else shape[0]
        if fan_out is None:
            fan_out = shape[1] if len(shape) > 1 else shape[0]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return self.gen.uniform(-bound, bound, size=shape)
