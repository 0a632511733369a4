"""Counter-based, splittable random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(seed, *path)`` through :class:`numpy.random.SeedSequence`.
Because the stream for, say, view 3 of sample 17 depends only on that path,
results do not depend on the order in which samples or views are processed.
"""

from __future__ import annotations

import numpy as np

# stream labels used as the first element of a key path
CORRUPT = 1
ENCODE = 2
AUGMENT = 3
VIEW_ENCODE = 4
INIT = 5
SHUFFLE = 6
DATA = 7
TRAIN_ENCODE = 8

SEED_MASK = (1 << 64) - 1


def generator(seed: int, *path: int) -> np.random.Generator:
    """Philox generator for the stream addressed by ``path`` under ``seed``."""
    ss = np.random.SeedSequence(int(seed) & SEED_MASK, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, *path: int) -> int:
    """A 64-bit integer seed for the sub-stream at ``path``."""
    ss = np.random.SeedSequence(int(seed) & SEED_MASK, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
