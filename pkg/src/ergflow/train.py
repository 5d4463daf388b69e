"""Conditional flow-matching training of the toy model, with checkpointing.

The objective regresses the velocity field onto the linear-path target
``x1 - x0`` at a uniformly drawn time, dropping the condition per sample with
a small probability so the same network also learns the null-conditional
branch. Checkpoints are written periodically and additionally at 1/16 of
training, which later serves as the weak model for auto-guidance.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import DataSample
from .models import ConditionEmbedding, ModelParams, ToyModel, denoiser_forward, encoder_forward, null_condition
from .rng import substream
from .tensor import (
    DTYPE,
    GradientTape,
    NonFiniteError,
    Tensor,
    backward,
    reshape,
    tensor_mean,
    tensor_sum,
)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch: int = 32
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cond_dropout_prob: float = 0.1
    checkpoint_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.cond_dropout_prob <= 1.0:
            raise ValueError("cond_dropout_prob must lie in [0, 1]")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


# ---------------------------------------------------------------------------
# flow-matching objective


def interpolate_path(x1: np.ndarray, x0: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Linear noise-to-data path: x_t = t*x1 + (1-t)*x0, target u = x1 - x0."""
    tf = DTYPE(t)
    return tf * x1 + (DTYPE(1.0) - tf) * x0, x1 - x0


def fm_sample_path(x1: Tensor, rng: np.random.Generator) -> tuple[Tensor, float, Tensor]:
    """Draw x0 ~ N(0, I) and t ~ U[0, 1]; return (x_t, t, target)."""
    t = float(rng.uniform())
    x0 = rng.standard_normal(x1.shape, dtype=DTYPE)
    x_t, u = interpolate_path(x1.array, x0, t)
    return Tensor(x_t, _trusted=True), t, Tensor(u, _trusted=True)


def draw_dropout_mask(rng: np.random.Generator, n: int, prob: float) -> np.ndarray:
    """Per-sample condition-dropout decisions (True = drop)."""
    return rng.uniform(size=n) < prob


def fm_loss(model: ToyModel, batch: list[DataSample], rng: np.random.Generator,
            cond_dropout_prob: float, instrument: dict | None = None,
            forward=denoiser_forward) -> Tensor:
    """Mean over the batch of |v(x_t, cond, t) - (x1 - x0)|^2 (sum over pixels).

    Each sample draws its own time and noise; with probability
    ``cond_dropout_prob`` its condition is replaced by the learned null row.
    """
    if not batch:
        raise ValueError("empty batch")
    xts, ts, us = [], [], []
    for s in batch:
        x_t, t, u = fm_sample_path(s.image, rng)
        xts.append(x_t.array)
        ts.append(t)
        us.append(u.array)
    drop = draw_dropout_mask(rng, len(batch), cond_dropout_prob)
    if instrument is not None:
        instrument["dropout_mask"] = drop

    tokens = np.stack([s.tokens for s in batch])
    enc = encoder_forward(tokens, model.params, model.encoder)           # [B, L, De]
    null_tok = null_condition(model.params, model.encoder).tokens        # [L, De]
    keep = Tensor((~drop).astype(DTYPE).reshape(-1, 1, 1), _trusted=True)
    mixed = keep * enc.tokens + (1.0 - keep) * null_tok
    cond = ConditionEmbedding(tokens=mixed, provenance="clean")

    x_t = Tensor(np.stack(xts), _trusted=True)
    target = Tensor(np.stack(us), _trusted=True)
    pred = forward(x_t, np.array(ts), cond, model)
    diff = pred - target
    per_sample = tensor_sum(reshape(diff * diff, (len(batch), -1)), axis=1)
    return tensor_mean(per_sample)


# ---------------------------------------------------------------------------
# optimization


def adam_step(params: ModelParams, grads: dict[str, Tensor], state: OptimizerState,
              cfg: TrainConfig) -> ModelParams:
    state.step += 1
    c1 = DTYPE(1.0 - cfg.beta1 ** state.step)
    c2 = DTYPE(1.0 - cfg.beta2 ** state.step)
    b1, b2 = DTYPE(cfg.beta1), DTYPE(cfg.beta2)
    lr, eps = DTYPE(cfg.lr), DTYPE(cfg.eps)
    out: ModelParams = {}
    for name, p in params.items():
        g = grads[name].array if name in grads else np.zeros(p.shape, dtype=DTYPE)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=DTYPE)
            v = np.zeros(p.shape, dtype=DTYPE)
        m = b1 * m + (DTYPE(1.0) - b1) * g
        v = b2 * v + (DTYPE(1.0) - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        out[name] = Tensor(p.array - step, name=name, _trusted=True)
    return out


@dataclass
class TrainResult:
    model: ToyModel
    checkpoints: list[tuple[int, str]]
    weak_checkpoint: str
    losses: list[float]


def train(model: ToyModel, dataset: list[DataSample], cfg: TrainConfig,
          out_dir: str | os.PathLike) -> TrainResult:
    """Adam-train the model; deterministic for a fixed seed.

    Writes a checkpoint every ``checkpoint_every`` steps, at the final step,
    and at ceil(steps/16) (the weak early model for auto-guidance).
    """
    if not dataset:
        raise ValueError("empty dataset")
    os.makedirs(out_dir, exist_ok=True)
    rng = substream(cfg.seed, 0x7A)
    state = OptimizerState()
    weak_step = math.ceil(cfg.steps / 16)
    losses: list[float] = []
    checkpoints: list[tuple[int, str]] = []
    weak_path = ""

    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(dataset), size=cfg.batch)
        batch = [dataset[i] for i in idx]
        tape = GradientTape()
        try:
            with tape:
                loss = fm_loss(model, batch, rng, cfg.cond_dropout_prob)
            grads = backward(tape, loss)
        except NonFiniteError as e:
            raise NonFiniteError(f"training aborted at step {step}: {e}") from e
        losses.append(loss.item())
        model = ToyModel(params=adam_step(model.params, grads, state, cfg),
                         denoiser=model.denoiser, encoder=model.encoder)

        if step == weak_step or step % cfg.checkpoint_every == 0 or step == cfg.steps:
            path = os.path.join(out_dir, f"ckpt_{step:06d}.ckpt")
            save_checkpoint(model.params, path)
            checkpoints.append((step, path))
            if step == weak_step:
                weak_path = path
    return TrainResult(model=model, checkpoints=checkpoints, weak_checkpoint=weak_path,
                       losses=losses)


# ---------------------------------------------------------------------------
# checkpoint format

MAGIC = b"ERGCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path: str | os.PathLike) -> None:
    """Bit-exact serialization: magic, manifest length, JSON manifest, payload.

    The manifest is an ordered list of {name, shape, dtype, offset, nbytes}
    with offsets relative to the start of the contiguous float32 payload.
    """
    manifest = []
    offset = 0
    blobs = []
    for name, t in params.items():
        nbytes = t.size * 4
        manifest.append({"name": name, "shape": list(t.shape), "dtype": "f32",
                         "offset": offset, "nbytes": nbytes})
        blobs.append(t.array.astype("<f4", copy=False).tobytes())
        offset += nbytes
    mjson = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(mjson)))
        f.write(mjson)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    magic = blob[:8]
    if magic != MAGIC:
        if magic[:7] == MAGIC[:7]:
            raise CheckpointError(
                f"{path}: version mismatch (got {magic.decode('ascii', 'replace')}, "
                f"want {MAGIC.decode('ascii')})")
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    (mlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[12 : 12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest: {e}") from e

    payload = blob[12 + mlen :]
    params: ModelParams = {}
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{path}: unsupported dtype {entry.get('dtype')!r} for {name}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if entry["nbytes"] != 4 * count:
            raise CheckpointError(
                f"{path}: manifest inconsistency for {name}: nbytes {entry['nbytes']} != 4*{count}")
        if name in params:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(shape)
        params[name] = Tensor(np.ascontiguousarray(arr), name=name)
    return params
