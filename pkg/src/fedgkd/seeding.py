"""Deterministic RNG stream derivation.

Every random decision in a run is drawn from a stream keyed by the master
seed plus integer tags, so results never depend on client execution order
or on how many workers run in parallel.
"""
from __future__ import annotations

import numpy as np

# Stream purposes. Keeping these distinct stops unrelated draws from
# colliding when they share the same (seed, round) prefix.
INIT = 0
DATA = 1
PARTITION = 2
SPLIT = 3
SAMPLE = 4
CLIENT = 5


def derive_rng(*keys: int) -> np.random.Generator:
    """Generator for the stream identified by an integer key path."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derive_seed(*keys: int) -> int:
    """Single integer seed derived from a key path (for APIs that take an int)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])
