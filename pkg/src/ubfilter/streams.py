"""Splittable random streams.

Every random quantity is drawn from a Philox (counter-based) generator keyed by
``(root_seed, *path)``, so a replicate's stream depends only on its index and
never on execution order or on how many workers are running.
"""

from __future__ import annotations

import numpy as np


def seed_sequence(root_seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(root_seed), spawn_key=tuple(int(p) for p in path))


def generator(root_seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the stream addressed by ``path``."""
    return np.random.Generator(np.random.Philox(seed_sequence(root_seed, *path)))


def seed_tag(*path: int) -> str:
    return ".".join(str(int(p)) for p in path)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
