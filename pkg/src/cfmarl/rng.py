"""Counter-based random streams with reproducible child derivation.

Every stochastic component in the package draws from an RngStream. Two
streams built from the same (seed, stream_id) produce bit-identical draw
sequences, and parallel components never share a stream: they derive
children with distinct ids instead.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(*values: int) -> int:
    """splitmix64-style hash of integers onto a 64-bit stream id."""
    h = 0x9E3779B97F4A7C15
    for v in values:
        h = (h ^ (int(v) & _MASK64)) & _MASK64
        h = (h * 0xBF58476D1CE4E5B9) & _MASK64
        h ^= h >> 27
        h = (h * 0x94D049BB133111EB) & _MASK64
        h ^= h >> 31
    return h & _MASK64


class RngStream:
    """A named Philox stream identified by (seed, stream_id).

    The underlying counter advances as values are drawn; `draws` tracks how
    many draw calls were made (diagnostic only, the Philox state is the
    source of truth).
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.draws = 0
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream_id]))

    def derive(self, *ids: int) -> "RngStream":
        """Child stream with an id hashed from this stream's id and `ids`."""
        return RngStream(self.seed, _mix(self.stream_id, *ids))

    def standard_normal(self, shape=()) -> np.ndarray:
        self.draws += 1
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        self.draws += 1
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=()) -> np.ndarray:
        self.draws += 1
        return self._gen.integers(low, high, shape)

    def choice(self, n, size, replace=False) -> np.ndarray:
        self.draws += 1
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n) -> np.ndarray:
        self.draws += 1
        return self._gen.permutation(n)

    def gumbel(self, shape=()) -> np.ndarray:
        self.draws += 1
        return self._gen.gumbel(0.0, 1.0, shape)

    def complex_normal(self, shape=()) -> np.ndarray:
        """Standard circularly symmetric complex Gaussian, unit variance."""
        self.draws += 1
        z = self._gen.standard_normal(tuple(np.atleast_1d(shape)) + (2,))
        return (z[..., 0] + 1j * z[..., 1]) / np.sqrt(2.0)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id:#x})"
