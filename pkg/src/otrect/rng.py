"""Seeded random streams.

All randomness goes through Philox (a counter-based bit generator) seeded
from a :class:`numpy.random.SeedSequence`. Independent tasks get child
streams via ``SeedSequence.spawn`` so results do not depend on execution
order.
"""

import numpy as np

ALGORITHM = "numpy.random.Philox via SeedSequence.spawn"


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn(seed, n: int) -> list:
    """``n`` independent generators derived from ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [make_rng(child) for child in ss.spawn(n)]


def child_seeds(seed, n: int) -> list:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n)
