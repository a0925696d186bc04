"""Namespaced RNG streams.

Every seeded component draws from SeedSequence(seed, spawn_key=(crc32(label),))
so two components given the same user seed still see unrelated streams.
Without this, e.g. blob class directions and initial noise prompts would be
drawn from identical values, silently correlating data with prompts.
"""

from __future__ import annotations

import zlib

import numpy as np


def component_seed(seed, label: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(zlib.crc32(label.encode()),))


def component_rng(seed, label: str) -> np.random.Generator:
    return np.random.default_rng(component_seed(seed, label))
