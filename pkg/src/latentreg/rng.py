"""Random streams.

Every random quantity is drawn from a Philox (counter-based) generator keyed by
``SeedSequence(seed, spawn_key=keys)``. The Monte Carlo engine uses keys
``(cell, replication)`` and the bootstrap uses ``(draw,)``, so a task's stream
depends only on its index and never on how tasks are scheduled across workers.
"""

import numpy as np

MAX_SEED = 2**64 - 1


def check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def stream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
