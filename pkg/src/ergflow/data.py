"""Deterministic synthetic dataset: Gaussian blobs on a ring with attribute prompts.

Each mode renders a soft blob at a (jittered) center; the prompt tokens encode
the mode's position / size / intensity buckets. Generation is a pure function
of the spec: per-sample RNG substreams make it independent of call order.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import pgm
from .rng import substream
from .tensor import Tensor

PAD, BOS = 0, 1
VOCAB = 32
PROMPT_LEN = 6

_POS_BASE = 2           # 8 angular buckets
_SIZE_BASE = 10         # 3 radius buckets
_INTENSITY_BASE = 13    # 4 intensity buckets


@dataclass(frozen=True)
class ModeSpec:
    id: int
    center: tuple[float, float]     # (x, y) in pixels
    radius: float
    intensity: float


@dataclass(frozen=True)
class DatasetSpec:
    modes: tuple[ModeSpec, ...]
    image_side: int = 16
    per_mode: int = 512
    jitter: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for m in self.modes:
            if not (0 <= m.center[0] < self.image_side and 0 <= m.center[1] < self.image_side):
                raise ValueError(f"mode {m.id} center {m.center} outside image bounds")
            if not 0 < m.intensity <= 1:
                raise ValueError(f"mode {m.id} intensity must be in (0, 1]")
            if m.radius <= 0:
                raise ValueError(f"mode {m.id} radius must be positive")

    def mode_by_id(self, mode_id: int) -> ModeSpec:
        for m in self.modes:
            if m.id == mode_id:
                return m
        raise KeyError(f"unknown mode id {mode_id}")


@dataclass(frozen=True)
class DataSample:
    image: Tensor                 # [1, S, S] in [-1, 1]
    mode_id: int
    tokens: np.ndarray            # int64 [PROMPT_LEN]


def default_spec(per_mode: int = 512, seed: int = 0) -> DatasetSpec:
    """8 modes on a ring, radius 2.0 px blobs, 0.5 px jitter.

    Ring radius 5.5 keeps adjacent centers ~4.2 px apart, wide enough that
    jittered samples always stay nearest their own prototype.
    """
    c = 7.5
    ring = 5.5
    modes = []
    for k in range(8):
        ang = 2.0 * math.pi * k / 8.0
        modes.append(ModeSpec(
            id=k,
            center=(c + ring * math.cos(ang), c + ring * math.sin(ang)),
            radius=2.0,
            intensity=1.0,
        ))
    return DatasetSpec(modes=tuple(modes), image_side=16, per_mode=per_mode, jitter=0.5, seed=seed)


def render_blob(center: tuple[float, float], radius: float, intensity: float,
                side: int) -> np.ndarray:
    """Pixel p = 2*intensity*exp(-|p - center|^2 / (2 radius^2)) - 1, shape [1, S, S]."""
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    d2 = (xs - center[0]) ** 2 + (ys - center[1]) ** 2
    img = 2.0 * intensity * np.exp(-d2 / (2.0 * radius * radius)) - 1.0
    return img[None].astype(np.float32)


def prompt_tokens(mode: ModeSpec, spec: DatasetSpec) -> np.ndarray:
    """Fixed-length token ids: [BOS, position, size, intensity, PAD...]."""
    c = (spec.image_side - 1) / 2.0
    ang = math.atan2(mode.center[1] - c, mode.center[0] - c) % (2.0 * math.pi)
    pos_bucket = int(ang / (2.0 * math.pi) * 8.0 + 0.5) % 8
    size_bucket = 0 if mode.radius < 1.5 else (1 if mode.radius < 2.5 else 2)
    intensity_bucket = min(3, int(math.ceil(mode.intensity * 4.0)) - 1)
    ids = [BOS, _POS_BASE + pos_bucket, _SIZE_BASE + size_bucket, _INTENSITY_BASE + intensity_bucket]
    ids += [PAD] * (PROMPT_LEN - len(ids))
    return np.array(ids, dtype=np.int64)


def generate(spec: DatasetSpec) -> list[DataSample]:
    """Render every sample of every mode; byte-identical for a fixed seed."""
    samples: list[DataSample] = []
    for mi, mode in enumerate(spec.modes):
        tokens = prompt_tokens(mode, spec)
        for si in range(spec.per_mode):
            rng = substream(spec.seed, mi, si)
            off = rng.standard_normal(2) * spec.jitter
            center = (mode.center[0] + off[0], mode.center[1] + off[1])
            img = render_blob(center, mode.radius, mode.intensity, spec.image_side)
            samples.append(DataSample(image=Tensor(img), mode_id=mode.id, tokens=tokens))
    return samples


def mode_center_table(spec: DatasetSpec) -> dict[int, np.ndarray]:
    """Flattened zero-jitter prototype image per mode id."""
    return {
        m.id: render_blob(m.center, m.radius, m.intensity, spec.image_side).reshape(-1)
        for m in spec.modes
    }


def dump_samples(samples: list[DataSample], out_dir: str | os.PathLike) -> str:
    """Write samples as PGM files plus a JSON index; returns the index path."""
    os.makedirs(out_dir, exist_ok=True)
    index = []
    for i, s in enumerate(samples):
        fname = f"sample_{i:05d}.pgm"
        pgm.write_pgm(os.path.join(out_dir, fname), s.image.array)
        index.append({"file": fname, "mode": s.mode_id, "tokens": s.tokens.tolist()})
    index_path = os.path.join(out_dir, "index.json")
    with open(index_path, "w") as f:
        json.dump(index, f, indent=1)
    return index_path
