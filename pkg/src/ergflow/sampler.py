"""Deterministic Euler integration of the flow ODE under a guidance spec.

Left-endpoint Euler on the uniform grid t_k = k/N from noise (t=0) to data
(t=1). Every sample owns an RNG substream keyed by its position, so a batch
of B trajectories is bitwise identical to B single-sample runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .guidance import GuidanceSession, GuidanceSpec
from .models import ToyModel
from .rng import normal32, substream
from .tensor import DTYPE, NonFiniteError, Tensor


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    seed: int = 0
    batch: int = 1
    record_trajectory: bool = False
    stream_base: int = 0        # offset of the first sample's RNG substream

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class Trajectory:
    times: np.ndarray                                   # [steps+1], t_0=0, t_N=1
    states: list[np.ndarray] = field(default_factory=list)
    pos_velocities: list[np.ndarray] = field(default_factory=list)
    neg_velocities: list[np.ndarray] = field(default_factory=list)


def euler_integrate(x0: np.ndarray, velocity_fn, steps: int,
                    record: Trajectory | None = None) -> np.ndarray:
    """x <- x + (1/N) * v(x, k/N) for k = 0..N-1, aborting on non-finite state."""
    x = np.ascontiguousarray(x0, dtype=DTYPE)
    dt = DTYPE(1.0 / steps)
    if record is not None:
        record.states.append(x.copy())
    for k in range(steps):
        t = k / steps
        v = velocity_fn(Tensor(x, _trusted=True), t)
        x = x + dt * v.array
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state at integration step {k} (t={t:.4f})")
        if record is not None:
            record.states.append(x.copy())
    return x


def euler_sample(model: ToyModel, spec: GuidanceSpec, prompt_tokens,
                 cfg: SamplerConfig, weak_model: ToyModel | None = None,
                 ) -> tuple[Tensor, Trajectory | None]:
    """Sample a batch of images under the guidance spec.

    ``prompt_tokens`` is one token-id sequence shared by the batch, or None
    for unconditional sampling. Identical seeds and specs give bitwise
    identical samples regardless of batch size.
    """
    s = model.denoiser.image_side
    rngs = [substream(cfg.seed, cfg.stream_base + i) for i in range(cfg.batch)]
    x0 = np.stack([normal32(r, (1, s, s)) for r in rngs])
    session = GuidanceSession(model, spec, prompt_tokens, weak_model=weak_model,
                              cads_rngs=rngs)
    traj = None
    rec_list: list | None = None
    if cfg.record_trajectory:
        traj = Trajectory(times=np.arange(cfg.steps + 1) / cfg.steps)
        rec_list = []

    def vfn(x: Tensor, t: float) -> Tensor:
        return session.velocity(x, t, record=rec_list)

    out = euler_integrate(x0, vfn, cfg.steps, record=traj)
    if traj is not None:
        traj.pos_velocities = [p for p, _ in rec_list]
        traj.neg_velocities = [n for _, n in rec_list]
    return Tensor(out, _trusted=True), traj
