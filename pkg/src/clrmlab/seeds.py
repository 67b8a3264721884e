"""Deterministic RNG streams from composite seeds.

Every stochastic choice draws from a stream keyed by (seed, tags...), so
results are reproducible and independent of execution order or thread count.
"""

from __future__ import annotations

import numpy as np


def seed_tuple(seed) -> tuple:
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def stream(seed, *tags) -> np.random.Generator:
    """RNG for the stream identified by the composite key (seed, *tags)."""
    return np.random.default_rng(np.random.SeedSequence(seed_tuple(seed) + tags))
