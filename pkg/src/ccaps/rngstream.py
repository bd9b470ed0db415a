"""Deterministic RNG streams keyed by integer tuples.

Every stochastic component draws from its own stream derived from
(seed, stream id, ...context), so runs are reproducible and resumable
without serializing generator internals: re-deriving the stream for a
given epoch replays it exactly.
"""

from __future__ import annotations

import numpy as np

# stream ids; keep stable, they are part of the reproducibility contract
INIT_STREAM = 0
SHUFFLE_STREAM = 1
AUGMENT_STREAM = 2


def stream_rng(*key: int) -> np.random.Generator:
    """PCG64 generator for the stream identified by `key` (non-negative ints)."""
    if any(k < 0 for k in key):
        raise ValueError(f"stream key must be non-negative, got {key}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))
