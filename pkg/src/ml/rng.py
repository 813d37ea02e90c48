"""Seed-derived random streams.

Every random draw in the package comes from a Philox (counter-based) generator
keyed by ``(seed, purpose, *indices)``, so independent consumers never share
state and results do not depend on call order between them.
"""
from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    """Purpose keys for derived streams."""

    INIT = 0
    BATCH = 1
    MASK = 2
    SAMPLE = 3
    CORPUS = 4
    SPLIT = 5
    GRADCHECK = 6
    EVAL = 7


def stream(seed: int, purpose: Stream, *indices: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, purpose, *indices)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = (int(purpose), *(int(i) for i in indices))
    seq = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))
