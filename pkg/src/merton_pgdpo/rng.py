"""Counter-based random streams.

Every draw is addressed by ``(seed, iteration, stream, position)``.  The
first three form a Philox key; ``position`` is the counter offset, so the
value of draw ``(i, k)`` in an ``(M, N)`` block is a pure function of those
coordinates and never depends on what else was drawn before.  This is what
lets a resumed run (or a worker that only simulates some paths) see exactly
the same noise as an uninterrupted one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

NODES = 0
BROWNIAN = 1
EVAL_NODES = 2
EVAL_BROWNIAN = 3
PROBE = 4
_N_STREAMS = 16

_U53 = 2.0**-53


@dataclass(frozen=True)
class Stream:
    seed: int
    iteration: int
    stream: int

    def _bitgen(self) -> np.random.Philox:
        key1 = (int(self.iteration) * _N_STREAMS + int(self.stream)) & (2**64 - 1)
        return np.random.Philox(key=[int(self.seed) & (2**64 - 1), key1])

    def uniform(self, shape) -> np.ndarray:
        """Uniforms on the open interval (0, 1), one 64-bit word per draw."""
        n = int(np.prod(shape))
        raw = self._bitgen().random_raw(n)
        return (((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _U53).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Standard normals by inverse CDF, so position i maps to word i."""
        return ndtri(self.uniform(shape))


class KeyedRng:
    """Factory of :class:`Stream` objects for one global seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, iteration: int, stream: int) -> Stream:
        return Stream(self.seed, int(iteration), int(stream))
