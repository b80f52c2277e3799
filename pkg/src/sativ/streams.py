"""Splittable random streams.

Every random draw in the package flows through a stream addressed by a
(seed, *path) tuple of integers, so any group's draw is reproducible from
the root seed and its index, independent of evaluation order or the number
of worker processes.  Built on ``numpy.random.SeedSequence`` spawn keys.
"""
from __future__ import annotations

import numpy as np

# Reserved path tags.  Streams with different leading tags never collide.
TAG_SATURATIONS = 0
TAG_GROUP = 1
TAG_REPLICATION = 2
TAG_ORACLE = 3

Seed = int | tuple[int, ...]


def substream(seed: Seed, *path: int) -> np.random.Generator:
    """Return the generator at address ``(seed, *path)``.

    The same address always yields the same stream; distinct addresses
    yield statistically independent streams.
    """
    entropy = seed if isinstance(seed, int) else list(seed)
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy, spawn_key=path))


def replication_seed(seed: Seed, rep: int) -> tuple[int, ...]:
    """Derive the root seed for Monte Carlo replication ``rep``."""
    base = (seed,) if isinstance(seed, int) else tuple(seed)
    return base + (TAG_REPLICATION, rep)
