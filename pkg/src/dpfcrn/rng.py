"""Seeded counter-based generators with named, independent sub-streams."""

import numpy as np

# sub-stream tags used as spawn keys
DATA, SOLVER, MASK, PARTITION, SYNTH = 0, 1, 2, 3, 4


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator for ``seed`` and the integer path ``keys``.

    Distinct key paths give statistically independent streams, so each client
    can own separate streams for data sampling, solver noise and masks.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))
