"""Seeded random streams.

All randomness goes through a Philox counter-based generator keyed by
``(seed, stream, *extra)`` so every subsystem draws from its own reproducible
stream regardless of call order elsewhere.
"""
from __future__ import annotations

import numpy as np

PHANTOM = 1
PLAN = 2
NOISE = 3
TEACHER = 4
DISTILL = 5
GAN = 6
META_INIT = 7
META_TRAIN = 8
PLANNING = 9
SAMPLER = 10
INIT = 11
EVAL = 12


def stream(seed: int, stream_id: int, *extra: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream_id), *(int(e) for e in extra)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
