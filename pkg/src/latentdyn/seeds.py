"""Deterministic seed derivation.

Every run derives all randomness from one root seed. Sub-streams are
labeled with fixed integer tags so that, e.g., replicate 3's simulation
stream never collides with replicate 3's network initialization, and
adding streams later cannot shift existing ones.
"""

from __future__ import annotations

import numpy as np

SIMULATION = 1
MODEL_INIT = 2
TRAINING = 3
REPLICATE = 4
ENCODER = 10
DECODER = 11
BASELINE_NET = 12


def seed_sequence(root_seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root_seed), *[int(p) for p in path]])


def derive_rng(root_seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root_seed, *path))
