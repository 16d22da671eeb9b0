"""Seed hierarchy.

Every random stream is derived from one base seed and a key path::

    derive_seed(base, stream, *indices) = SeedSequence(base, spawn_key=(stream, *indices)) -> u64

Streams: INIT (parameter init), TRAIN (training episode i), EVAL (test
episode i), ROBUST (robustness run r, episode i), DATA (synthetic data),
CALIB (deviation calibration), CHECK (gradient-check inputs). A per-episode seed therefore depends only on
(base seed, stream, episode index), never on execution order.
"""

import numpy as np

INIT, TRAIN, EVAL, ROBUST, DATA, CALIB, CHECK = range(7)


def derive_seed(base: int, *path: int) -> int:
    ss = np.random.SeedSequence(int(base), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_rng(base: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *path))
