"""Deterministic counter-based RNG substreams.

Independent streams are derived from a run seed plus integer path keys
(sample index, worker id, ...) so that batch size, thread count, or call
order never change the draws any single consumer sees.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def normal32(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape, dtype=np.float32)
