"""Multi-head attention as energy minimization, plus test-time rectification.

Attention here is the fixed-point update of the energy

    E(q; patterns) = 1/2 * q.q - alpha * lse_{tau*beta}(patterns.q)

where ``lse_b(x) = b^-1 log sum_i exp(b*x_i)``. One descent step with step
size ``gamma`` is ``q <- q - gamma * (q - alpha * softmax(tau*beta*q.K^T) V)``
and recovers standard attention at ``alpha = gamma = tau = 1`` with one step.
The rectification config weakens a trained layer at inference time by moving
those four knobs away from the identity, or by swapping the attention map for
an identity / uniform-smoothing surrogate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .tensor import (
    DTYPE,
    Tensor,
    concat,
    matmul,
    narrow,
    reshape,
    softmax_rows,
    tensor_mean,
    transpose,
)

MODES = ("off", "temperature", "identity", "smoothing")


@dataclass(frozen=True)
class RectificationConfig:
    """Test-time attention knobs: what to weaken, by how much, and where.

    ``layer_lo``/``layer_hi`` select the inclusive-exclusive block range the
    rectification applies to; outside it layers always run standard attention.
    """

    mode: str = "off"
    tau: float = 1.0       # softmax temperature rescale (temperature mode)
    alpha: float = 1.0     # pattern-matching weight
    gamma: float = 1.0     # descent step size
    steps: int = 1         # descent iterations K
    layer_lo: int = 0
    layer_hi: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown rectification mode {self.mode!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.mode == "temperature" and self.tau <= 0:
            raise ValueError("tau must be positive in temperature mode")
        if not 0 <= self.layer_lo <= self.layer_hi:
            raise ValueError(f"bad layer range [{self.layer_lo}, {self.layer_hi})")

    @classmethod
    def off(cls) -> "RectificationConfig":
        return cls()

    def validate_depth(self, depth: int) -> None:
        if self.layer_hi > depth:
            raise ValueError(f"layer range [{self.layer_lo}, {self.layer_hi}) exceeds depth {depth}")

    def active_at(self, layer: int) -> bool:
        return self.mode != "off" and self.layer_lo <= layer < self.layer_hi

    def is_noop(self) -> bool:
        """True when every layer provably behaves as standard attention."""
        if self.mode == "off" or self.layer_lo >= self.layer_hi:
            return True
        return (
            self.mode == "temperature"
            and self.tau == 1.0
            and self.alpha == 1.0
            and self.gamma == 1.0
            and self.steps == 1
        )


@dataclass(frozen=True)
class AttentionLayerWeights:
    """Projection weights of one multi-head attention layer (no biases)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_out: Tensor
    heads: int
    head_dim: int

    def __post_init__(self):
        dim = self.heads * self.head_dim
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v), ("w_out", self.w_out)):
            if w.shape != (dim, dim):
                raise ValueError(f"{name} must be {(dim, dim)}, got {w.shape}")

    @property
    def beta(self) -> float:
        """Base inverse temperature 1/sqrt(head_dim)."""
        return 1.0 / math.sqrt(self.head_dim)


# ---------------------------------------------------------------------------
# energy, gradient, descent


def _retrieve(q: Tensor, k: Tensor, v: Tensor, inv_temp: float) -> Tensor:
    """softmax(inv_temp * q k^T) v over the last two axes, batched."""
    nd = len(k.shape)
    axes = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    scores = matmul(q, transpose(k, axes))
    return matmul(softmax_rows(scores, inv_temp), v)


def hopfield_energy(xi: Tensor, patterns: Tensor, beta: float, tau: float = 1.0,
                    alpha: float = 1.0) -> float:
    """Energy of state ``xi`` [d] against stored patterns [d, N]."""
    if beta <= 0 or tau <= 0:
        raise ValueError("beta and tau must be positive")
    x = xi.array.reshape(-1)
    p = patterns.array
    if p.ndim != 2 or p.shape[0] != x.shape[0]:
        raise ValueError(f"patterns must be [d, N] with d={x.shape[0]}, got {patterns.shape}")
    scores = np.matmul(x[None, :], p)[0]
    b = DTYPE(tau * beta)
    m = scores.max()
    lse = m + np.log(np.exp(b * (scores - m)).sum(dtype=DTYPE)) / b
    return float(DTYPE(0.5) * np.dot(x, x) - DTYPE(alpha) * lse)


def energy_gradient(xi: Tensor, patterns: Tensor, beta: float, tau: float = 1.0,
                    alpha: float = 1.0) -> Tensor:
    """Analytic gradient of :func:`hopfield_energy` w.r.t. the state.

    Accepts a single state [d] or a stack [S, d]; rows never interact, so the
    stacked form is the gradient of the summed per-row energy and reproduces
    the multistep update's linear algebra shape for shape.
    """
    if beta <= 0 or tau <= 0:
        raise ValueError("beta and tau must be positive")
    single = len(xi.shape) == 1
    d = xi.shape[-1]
    if patterns.shape[0] != d:
        raise ValueError(f"patterns must be [d, N] with d={d}, got {patterns.shape}")
    q = reshape(xi, (1, d)) if single else xi
    kv = Tensor(np.ascontiguousarray(patterns.array.T))
    out = q - float(alpha) * _retrieve(q, kv, kv, tau * beta)
    return reshape(out, (d,)) if single else out


def multistep_attention(q: Tensor, k: Tensor, v: Tensor, cfg: RectificationConfig,
                        beta: float) -> Tensor:
    """Apply ``steps`` energy-descent updates to the queries and return them.

    One update is ``q <- q - gamma * (q - alpha * softmax(tau*beta*q k^T) v)``;
    at steps=1, gamma=alpha=1 the result is exactly ``softmax(tau*beta*q k^T) v``.
    Query rows never interact, so the update is valid batched and row-sliced.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    inv_temp = cfg.tau * beta
    if cfg.steps == 1 and cfg.gamma == 1.0 and cfg.alpha == 1.0:
        return _retrieve(q, k, v, inv_temp)
    gamma = float(cfg.gamma)
    alpha = float(cfg.alpha)
    for _ in range(cfg.steps):
        q = q - gamma * (q - alpha * _retrieve(q, k, v, inv_temp))
    return q


# ---------------------------------------------------------------------------
# full multi-head layer


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    b, t, _ = x.shape
    return transpose(reshape(x, (b, t, heads, head_dim)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def rectified_mha(x: Tensor, w: AttentionLayerWeights, cfg: RectificationConfig,
                  img_tokens: int | None = None, capture: list | None = None) -> Tensor:
    """Multi-head attention over ``x`` [B, T, D] with optional rectification.

    Modes: ``off`` is standard attention; ``temperature`` runs the energy
    descent with the softmax temperature rescaled by ``tau`` (applied to the
    first ``img_tokens`` query rows only, when given; remaining rows keep
    tau=1); ``identity`` replaces the attention output by the values;
    ``smoothing`` replaces every query by the mean query before attending.

    ``capture``, when provided in ``off`` mode, collects each call's
    post-softmax probability array [B, H, T, T] for diagnostics.
    """
    b, t, d = x.shape
    if d != w.heads * w.head_dim:
        raise ValueError(f"model dim {d} != heads*head_dim {w.heads * w.head_dim}")
    q = _split_heads(matmul(x, w.w_q), w.heads, w.head_dim)
    k = _split_heads(matmul(x, w.w_k), w.heads, w.head_dim)
    v = _split_heads(matmul(x, w.w_v), w.heads, w.head_dim)

    if cfg.mode == "off":
        kt = transpose(k, (0, 1, 3, 2))
        probs = softmax_rows(matmul(q, kt), w.beta)
        if capture is not None:
            capture.append(probs.array)
        out = matmul(probs, v)
    elif cfg.mode == "temperature":
        if img_tokens is None or img_tokens >= t:
            out = multistep_attention(q, k, v, cfg, w.beta)
        else:
            q_img = narrow(q, 2, 0, img_tokens)
            q_rest = narrow(q, 2, img_tokens, t - img_tokens)
            out_img = multistep_attention(q_img, k, v, cfg, w.beta)
            out_rest = multistep_attention(q_rest, k, v, replace(cfg, tau=1.0), w.beta)
            out = concat((out_img, out_rest), axis=2)
    elif cfg.mode == "identity":
        out = v
    elif cfg.mode == "smoothing":
        q_mean = tensor_mean(q, axis=2, keepdims=True)
        row = _retrieve(q_mean, k, v, w.beta)                      # [B, H, 1, hd]
        out = row + Tensor(np.zeros((b, w.heads, t, w.head_dim), dtype=DTYPE))
    else:  # pragma: no cover - rejected by RectificationConfig
        raise ValueError(f"unknown rectification mode {cfg.mode!r}")

    return matmul(_merge_heads(out), w.w_out)
