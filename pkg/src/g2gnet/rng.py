"""Seeded random streams.

Every random draw in the package comes from a PCG64 generator whose seed
sequence is ``SeedSequence(root_seed, spawn_key=(purpose, *key))``.  The
purpose code separates independent uses (mask sampling, weight init, ...)
and the trailing key usually carries a layer index and, for per-event
draws, an iteration number.  Streams are therefore stateless to derive:
the same (seed, purpose, key) always reproduces the same numbers on any
platform numpy supports.
"""

import numpy as np

GROUPING = 1
MASK = 2
INIT = 3
DST = 4
SHUFFLE = 5

PURPOSES = {
    "grouping": GROUPING,
    "mask": MASK,
    "init": INIT,
    "dst": DST,
    "shuffle": SHUFFLE,
}


def stream(seed: int, purpose: int, *key: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose),) + tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
