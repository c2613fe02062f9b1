"""Seeded random streams.

Every experiment has one root seed.  Independent streams are derived from it
with a spawn key ``(purpose, index)`` so that a replicate's draws depend only
on the root seed and its own index, never on scheduling order.
"""

from __future__ import annotations

import numpy as np

ENV_STREAM = 0
REPLICATE_STREAM = 1
SPINE_STREAM = 2


def stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), int(index)))
    return np.random.Generator(np.random.PCG64(ss))
