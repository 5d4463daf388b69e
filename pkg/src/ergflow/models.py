"""Toy diffusion-transformer denoiser and conditioning encoder.

The denoiser patchifies a grayscale image, appends projected condition tokens
to the image tokens (one joint stream, so conditioning flows through
attention), runs transformer blocks with adaptive layer norm on the flow
time, and unpatchifies a velocity field. The encoder is a small bidirectional
transformer over prompt token ids whose attention temperature can be rescaled
over a block range at inference time.

Bitwise batch independence: per-sample vectors (time embeddings, adaptive-norm
modulations) are kept as [B, 1, D] so every matmul stays a stacked per-sample
GEMM. Folding the batch into a 2-D GEMM changes BLAS accumulation paths with
batch size and would break sampling reproducibility guarantees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionLayerWeights, RectificationConfig, rectified_mha
from .rng import substream
from .tensor import (
    DTYPE,
    Tensor,
    concat,
    gelu,
    layer_norm,
    matmul,
    narrow,
    parameter,
    reshape,
    take_rows,
    transpose,
)

ModelParams = dict[str, Tensor]

_OFF = RectificationConfig.off()


@dataclass(frozen=True)
class DenoiserConfig:
    image_side: int = 16
    patch: int = 2
    depth: int = 6
    dim: int = 64
    heads: int = 4
    cond_tokens: int = 6
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_side % self.patch != 0:
            raise ValueError("image_side must be divisible by patch")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch

    @property
    def img_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def tokens(self) -> int:
        return self.img_tokens + self.cond_tokens


@dataclass(frozen=True)
class EncoderConfig:
    vocab: int = 32
    depth: int = 4
    dim: int = 32
    heads: int = 2
    max_len: int = 6
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")


@dataclass(frozen=True)
class ConditionEmbedding:
    """Encoder output tokens plus how they were produced."""

    tokens: Tensor                      # [L, De] or [B, L, De]
    provenance: str = "clean"           # clean | rectified | null | cads

    def batched(self, batch: int) -> Tensor:
        if len(self.tokens.shape) == 3:
            if self.tokens.shape[0] != batch:
                raise ValueError(f"condition batch {self.tokens.shape[0]} != {batch}")
            return self.tokens
        arr = np.broadcast_to(self.tokens.array, (batch,) + self.tokens.shape)
        return Tensor(np.ascontiguousarray(arr), _trusted=True)


@dataclass(frozen=True)
class ToyModel:
    params: ModelParams
    denoiser: DenoiserConfig
    encoder: EncoderConfig


# ---------------------------------------------------------------------------
# initialization


def init_params(dcfg: DenoiserConfig, ecfg: EncoderConfig, seed: int = 0) -> ModelParams:
    """Deterministic parameter map for the denoiser + encoder pair."""
    if dcfg.cond_tokens != ecfg.max_len:
        raise ValueError("denoiser cond_tokens must equal encoder max_len")
    rng = substream(seed, 0xE0)
    params: ModelParams = {}

    def w(name, shape, std=0.02):
        params[name] = parameter((rng.standard_normal(shape) * std).astype(DTYPE), name)

    def zeros(name, shape):
        params[name] = parameter(np.zeros(shape, dtype=DTYPE), name)

    de, dd = ecfg.dim, dcfg.dim
    w("enc.tok_emb", (ecfg.vocab, de))
    w("enc.pos_emb", (ecfg.max_len, de))
    for i in range(ecfg.depth):
        p = f"enc.block{i}"
        for ln in ("ln1", "ln2"):
            params[f"{p}.{ln}.g"] = parameter(np.ones(de, dtype=DTYPE), f"{p}.{ln}.g")
            zeros(f"{p}.{ln}.b", (de,))
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"{p}.attn.{proj}", (de, de))
        w(f"{p}.mlp.w1", (de, ecfg.mlp_ratio * de))
        zeros(f"{p}.mlp.b1", (ecfg.mlp_ratio * de,))
        w(f"{p}.mlp.w2", (ecfg.mlp_ratio * de, de))
        zeros(f"{p}.mlp.b2", (de,))
    params["enc.final_ln.g"] = parameter(np.ones(de, dtype=DTYPE), "enc.final_ln.g")
    zeros("enc.final_ln.b", (de,))

    w("den.patch_w", (dcfg.patch * dcfg.patch, dd))
    zeros("den.patch_b", (dd,))
    w("den.pos_emb", (dcfg.tokens, dd))
    w("den.cond_proj_w", (de, dd))
    zeros("den.cond_proj_b", (dd,))
    w("den.null_cond", (1, de))
    w("den.time.w1", (dd, dd))
    zeros("den.time.b1", (dd,))
    w("den.time.w2", (dd, dd))
    zeros("den.time.b2", (dd,))
    for i in range(dcfg.depth):
        p = f"den.block{i}"
        zeros(f"{p}.ada_w", (dd, 6 * dd))     # adaptive-norm path starts as identity
        zeros(f"{p}.ada_b", (6 * dd,))
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"{p}.attn.{proj}", (dd, dd))
        w(f"{p}.mlp.w1", (dd, dcfg.mlp_ratio * dd))
        zeros(f"{p}.mlp.b1", (dcfg.mlp_ratio * dd,))
        w(f"{p}.mlp.w2", (dcfg.mlp_ratio * dd, dd))
        zeros(f"{p}.mlp.b2", (dd,))
    zeros("den.final_ada_w", (dd, 2 * dd))
    zeros("den.final_ada_b", (2 * dd,))
    zeros("den.head_w", (dd, dcfg.patch * dcfg.patch))   # zero head: v(x, t) = 0 at init
    zeros("den.head_b", (dcfg.patch * dcfg.patch,))
    return params


def init_model(dcfg: DenoiserConfig | None = None, ecfg: EncoderConfig | None = None,
               seed: int = 0) -> ToyModel:
    dcfg = dcfg or DenoiserConfig()
    ecfg = ecfg or EncoderConfig()
    return ToyModel(params=init_params(dcfg, ecfg, seed), denoiser=dcfg, encoder=ecfg)


def attention_weights(params: ModelParams, prefix: str, heads: int, dim: int) -> AttentionLayerWeights:
    return AttentionLayerWeights(
        w_q=params[f"{prefix}.wq"], w_k=params[f"{prefix}.wk"],
        w_v=params[f"{prefix}.wv"], w_out=params[f"{prefix}.wo"],
        heads=heads, head_dim=dim // heads,
    )


# ---------------------------------------------------------------------------
# shared pieces


def _rows(x: Tensor) -> Tensor:
    """Lift [B, D] to [B, 1, D] so downstream matmuls stay stacked per sample."""
    b, d = x.shape
    return reshape(x, (b, 1, d))


def _mlp(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = gelu(matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def time_features(t, dim: int) -> Tensor:
    """Raw sinusoidal features of flow time: interleaved sin/cos over a
    geometric frequency ladder, shape [B, dim]."""
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(ts < 0) or np.any(ts > 1):
        raise ValueError(f"flow time must lie in [0, 1], got {ts}")
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    ang = ts[:, None] * freqs[None, :]
    feats = np.empty((len(ts), dim), dtype=DTYPE)
    feats[:, 0::2] = np.sin(ang)
    feats[:, 1::2] = np.cos(ang)
    return Tensor(feats)


def time_embedding(t, params: ModelParams, dim: int) -> Tensor:
    """Learned 2-layer map over the sinusoidal features, shape [B, 1, dim]."""
    feats = _rows(time_features(t, dim))
    h = gelu(matmul(feats, params["den.time.w1"]) + params["den.time.b1"])
    return matmul(h, params["den.time.w2"]) + params["den.time.b2"]


# ---------------------------------------------------------------------------
# encoder


def encoder_forward(tokens, params: ModelParams, ecfg: EncoderConfig,
                    tau_c: float = 1.0, lo: int = 0, hi: int = 0) -> ConditionEmbedding:
    """Encode prompt token ids [L] or [B, L]; blocks in [lo, hi) attend with
    their softmax temperature rescaled by tau_c."""
    if tau_c <= 0:
        raise ValueError("tau_c must be positive")
    if not 0 <= lo <= hi <= ecfg.depth:
        raise ValueError(f"encoder block range [{lo}, {hi}) outside depth {ecfg.depth}")
    ids = np.asarray(tokens)
    single = ids.ndim == 1
    ids = np.atleast_2d(ids)
    if ids.shape[1] != ecfg.max_len:
        raise ValueError(f"prompt length {ids.shape[1]} != max_len {ecfg.max_len}")
    if ids.min() < 0 or ids.max() >= ecfg.vocab:
        raise ValueError(f"token id out of vocab range [0, {ecfg.vocab})")

    x = take_rows(params["enc.tok_emb"], ids) + params["enc.pos_emb"]
    rectified = tau_c != 1.0 and lo < hi
    rect = RectificationConfig(mode="temperature", tau=tau_c, layer_lo=lo, layer_hi=hi) \
        if rectified else _OFF
    for i in range(ecfg.depth):
        p = f"enc.block{i}"
        cfg = rect if rect.active_at(i) else _OFF
        h = layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        x = x + rectified_mha(h, attention_weights(params, f"{p}.attn", ecfg.heads, ecfg.dim), cfg)
        h = layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        x = x + _mlp(h, params, f"{p}.mlp")
    x = layer_norm(x, params["enc.final_ln.g"], params["enc.final_ln.b"])
    if single:
        x = reshape(x, x.shape[1:])
    return ConditionEmbedding(tokens=x, provenance="rectified" if rectified else "clean")


def null_condition(params: ModelParams, ecfg: EncoderConfig) -> ConditionEmbedding:
    """Learned null-condition row tiled to the prompt length."""
    ones = Tensor(np.ones((ecfg.max_len, 1), dtype=DTYPE), _trusted=True)
    return ConditionEmbedding(tokens=matmul(ones, params["den.null_cond"]), provenance="null")


# ---------------------------------------------------------------------------
# denoiser


def patchify(x: Tensor, dcfg: DenoiserConfig) -> Tensor:
    b = x.shape[0]
    g, p = dcfg.grid, dcfg.patch
    t = reshape(x, (b, g, p, g, p))
    return reshape(transpose(t, (0, 1, 3, 2, 4)), (b, g * g, p * p))


def unpatchify(tokens: Tensor, dcfg: DenoiserConfig) -> Tensor:
    b = tokens.shape[0]
    g, p = dcfg.grid, dcfg.patch
    t = reshape(tokens, (b, g, g, p, p))
    return reshape(transpose(t, (0, 1, 3, 2, 4)), (b, 1, dcfg.image_side, dcfg.image_side))


def _modulation(e: Tensor, params: ModelParams, prefix: str, dim: int, parts: int) -> list[Tensor]:
    mods = matmul(e, params[f"{prefix}_w"]) + params[f"{prefix}_b"]   # [B, 1, parts*dim]
    return [narrow(mods, 2, j * dim, dim) for j in range(parts)]


def denoiser_forward(x_t: Tensor, t, cond: ConditionEmbedding | None, model: ToyModel,
                     rect: RectificationConfig = _OFF, capture: list | None = None) -> Tensor:
    """Predict the velocity field for x_t at flow time t.

    ``rect`` weakens attention in denoiser blocks [layer_lo, layer_hi);
    condition-token queries always keep temperature 1. ``cond=None`` uses the
    learned null condition. ``capture`` collects per-block attention
    probabilities (standard-attention blocks only).
    """
    dcfg, ecfg, params = model.denoiser, model.encoder, model.params
    s = dcfg.image_side
    if len(x_t.shape) != 4 or x_t.shape[1] != 1 or x_t.shape[2:] != (s, s):
        raise ValueError(f"expected input [B, 1, {s}, {s}], got {x_t.shape}")
    rect.validate_depth(dcfg.depth)
    b = x_t.shape[0]

    img = matmul(patchify(x_t, dcfg), params["den.patch_w"]) + params["den.patch_b"]
    cemb = cond if cond is not None else null_condition(params, ecfg)
    ctok = matmul(cemb.batched(b), params["den.cond_proj_w"]) + params["den.cond_proj_b"]
    x = concat((img, ctok), axis=1) + params["den.pos_emb"]

    e = time_embedding(t if np.ndim(t) else np.full(b, t, dtype=np.float64), params, dcfg.dim)
    for i in range(dcfg.depth):
        p = f"den.block{i}"
        cfg = rect if rect.active_at(i) else _OFF
        sh1, sc1, g1, sh2, sc2, g2 = _modulation(e, params, f"{p}.ada", dcfg.dim, 6)
        h = layer_norm(x) * (1.0 + sc1) + sh1
        att = rectified_mha(h, attention_weights(params, f"{p}.attn", dcfg.heads, dcfg.dim),
                            cfg, img_tokens=dcfg.img_tokens, capture=capture)
        x = x + g1 * att
        h = layer_norm(x) * (1.0 + sc2) + sh2
        x = x + g2 * _mlp(h, params, f"{p}.mlp")

    sh, sc = _modulation(e, params, "den.final_ada", dcfg.dim, 2)
    h = layer_norm(narrow(x, 1, 0, dcfg.img_tokens)) * (1.0 + sc) + sh
    out = matmul(h, params["den.head_w"]) + params["den.head_b"]
    return unpatchify(out, dcfg)
