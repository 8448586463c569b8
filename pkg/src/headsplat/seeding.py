"""Deterministic RNG construction.

Every synthetic weight block in the engine draws from a generator built
here, so a (seed, *tags) pair always produces the same stream no matter the
import order, platform, or thread count.
"""
from __future__ import annotations

import numpy as np


def seeded_rng(seed: int, *tags: int) -> np.random.Generator:
    """PCG64 generator keyed by a master seed plus integer namespace tags."""
    entropy = [int(seed) & 0xFFFFFFFF] + [int(t) & 0xFFFFFFFF for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *tags: int) -> int:
    """Collapse (seed, tags) into a single integer seed for sub-components."""
    entropy = [int(seed) & 0xFFFFFFFF] + [int(t) & 0xFFFFFFFF for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


# namespace tags for the pipeline's weight blocks
TAG_BACKBONE = 101
TAG_PE_TABLE = 102
TAG_ATTENTION = 103
TAG_OFFSET_MLP = 104
TAG_LEVEL_MLP = 105      # combined with the level index
TAG_CHANNEL_PROJ = 106
TAG_HEADS = 107
TAG_SHOULDER_CONV = 108
TAG_MODEL = 109
TAG_REFINER = 110
