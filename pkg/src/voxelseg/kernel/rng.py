"""Replayable random streams.

Every stochastic op in the pipeline draws from an explicit
``numpy.random.Generator`` backed by the counter-based Philox bit
generator.  Streams are derived from a 64-bit seed, and substreams are
split deterministically by index so that e.g. the B test-time-dropout
passes are independent and replayable.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Root stream for a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def split_rng(seed: int, *path: int) -> np.random.Generator:
    """Deterministic substream for (seed, path).

    Identical (seed, path) tuples always yield identical streams; distinct
    paths yield statistically independent ones.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
