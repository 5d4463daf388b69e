"""The guidance family: one weighted combination per sampler step.

Every method contrasts a positive (conditional) velocity with a weaker
negative one and extrapolates:  w * v_pos + (1 - w) * v_neg.
The methods differ only in how the negative branch is weakened:

  cfg            null-condition forward
  erg            rectified attention in the denoiser (when t > kappa) and/or
                 a temperature-rescaled condition embedding
  pag / seg      identity / uniform-smoothing attention on the middle blocks
  autoguidance   an early (weak) checkpoint of the same model
  apg            cfg branches combined in clean-image space with projection,
                 norm rescaling, and negative momentum
  cads           the positive branch conditions on noise-annealed tokens
  erg_apg/erg_cads   the sanctioned combinations

At w = 1 every method reduces to the unguided conditional velocity; the
dispatcher returns that branch directly (bitwise, one function evaluation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import RectificationConfig
from .models import (
    ConditionEmbedding,
    ToyModel,
    denoiser_forward,
    encoder_forward,
)
from .tensor import DTYPE, Tensor

METHODS = ("none", "cfg", "erg", "apg", "erg_apg", "cads", "erg_cads", "pag", "seg",
           "autoguidance")
ERG_METHODS = ("erg", "erg_apg", "erg_cads")


def default_rectification() -> RectificationConfig:
    """Denoiser-side defaults: strong temperature cut on the middle blocks."""
    return RectificationConfig(mode="temperature", tau=0.01, alpha=1.0, gamma=1.5,
                               steps=1, layer_lo=2, layer_hi=4)


@dataclass(frozen=True)
class ErgParams:
    rect: RectificationConfig = field(default_factory=default_rectification)
    kappa: float = 0.4          # denoiser rectification active only for t > kappa
    tau_c: float = 0.01         # encoder temperature for the negative embedding
    enc_lo: int = 0
    enc_hi: int = 4

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")
        if self.tau_c <= 0:
            raise ValueError("tau_c must be positive")


@dataclass(frozen=True)
class ApgParams:
    r: float = 5.0              # norm cap on the momentum-filtered difference
    eta: float = 0.0            # weight of the parallel component
    momentum: float = -0.5


@dataclass(frozen=True)
class CadsParams:
    tau1: float = 0.6
    tau2: float = 0.9
    s: float = 0.25
    psi: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.tau1 <= self.tau2 <= 1.0:
            raise ValueError("need 0 <= tau1 <= tau2 <= 1")
        if self.s < 0:
            raise ValueError("s must be nonnegative")


@dataclass(frozen=True)
class GuidanceSpec:
    method: str = "none"
    w: float = 1.0
    erg: ErgParams = field(default_factory=ErgParams)
    apg: ApgParams = field(default_factory=ApgParams)
    cads: CadsParams = field(default_factory=CadsParams)
    weak_ckpt_path: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown guidance method {self.method!r}")


# ---------------------------------------------------------------------------
# primitive updates


def combine_cfg(v_pos: Tensor, v_neg: Tensor, w: float) -> Tensor:
    """w * v_pos + (1 - w) * v_neg."""
    if v_pos.shape != v_neg.shape:
        raise ValueError(f"shape mismatch {v_pos.shape} vs {v_neg.shape}")
    wf = DTYPE(w)
    with np.errstate(over="ignore", invalid="ignore"):
        out = wf * v_pos.array + (DTYPE(1.0) - wf) * v_neg.array
    return Tensor(out)


def velocity_to_clean(x_t: Tensor, v: Tensor, t: float) -> Tensor:
    """Clean-image estimate from a velocity: x_t + (1 - t) * v."""
    return Tensor(x_t.array + DTYPE(1.0 - t) * v.array)


def clean_to_velocity(x_t: Tensor, clean: Tensor, t: float) -> Tensor:
    """Exact inverse of :func:`velocity_to_clean` for t < 1."""
    if t >= 1.0:
        raise ZeroDivisionError("velocity is singular at t = 1")
    return Tensor((clean.array - x_t.array) / DTYPE(1.0 - t))


@dataclass
class ApgState:
    """Trajectory-local running momentum; reset for every new trajectory."""

    m: np.ndarray | None = None


def _per_sample(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)


def apg_update(pos_clean: Tensor, neg_clean: Tensor, w: float, params: ApgParams,
               state: ApgState) -> Tensor:
    """Projected guidance in clean-image space.

    d = pos - neg is momentum-filtered, norm-capped at r, split into parts
    parallel/orthogonal to the positive estimate, and recombined as
    pos + (w - 1) * (orth + eta * par). Norms and projections are per sample.
    """
    if pos_clean.shape != neg_clean.shape:
        raise ValueError(f"shape mismatch {pos_clean.shape} vs {neg_clean.shape}")
    d = pos_clean.array - neg_clean.array
    if state.m is not None:
        d = d + DTYPE(params.momentum) * state.m
    state.m = d

    shape = d.shape
    flat = _per_sample(d.copy())
    if math.isfinite(params.r):
        norms = np.linalg.norm(flat.astype(np.float64), axis=1)
        scale = np.minimum(1.0, params.r / np.maximum(norms, 1e-12))
        flat *= scale[:, None].astype(DTYPE)
    pos_flat = _per_sample(pos_clean.array)
    pp = np.sum(pos_flat.astype(np.float64) ** 2, axis=1)
    dp = np.sum(flat.astype(np.float64) * pos_flat.astype(np.float64), axis=1)
    coef = np.where(pp > 0, dp / np.where(pp > 0, pp, 1.0), 0.0).astype(DTYPE)
    par = coef[:, None] * pos_flat
    orth = flat - par
    update = orth + DTYPE(params.eta) * par
    out = pos_flat + DTYPE(w - 1.0) * update
    return Tensor(out.reshape(shape))


def cads_annealing(t: float, params: CadsParams) -> float:
    """Annealing coefficient g(t) in flow time: 0 early (full corruption),
    ramping linearly to 1 (clean) between 1-tau2 and 1-tau1."""
    lo, hi = 1.0 - params.tau2, 1.0 - params.tau1
    if t <= lo:
        return 0.0
    if t >= hi:
        return 1.0
    return (t - lo) / (hi - lo)


def cads_corrupt(cond: ConditionEmbedding, t: float, params: CadsParams,
                 rng: np.random.Generator) -> ConditionEmbedding:
    """Blend condition tokens with Gaussian noise per the annealing schedule:
    y_hat = sqrt(g) * y + s * sqrt(1-g) * n. psi < 1 mixes in a variant
    renormalized to the clean tokens' mean/std; psi = 1 applies none of it."""
    g = cads_annealing(t, params)
    y = cond.tokens.array
    noise = rng.standard_normal(y.shape, dtype=DTYPE)
    corrupted = DTYPE(math.sqrt(g)) * y + DTYPE(params.s * math.sqrt(1.0 - g)) * noise
    if params.psi != 1.0:
        std_c = corrupted.std()
        if std_c > 0:
            rescaled = (corrupted - corrupted.mean()) / std_c * y.std() + y.mean()
            corrupted = DTYPE(params.psi) * corrupted + DTYPE(1.0 - params.psi) * rescaled
    return ConditionEmbedding(tokens=Tensor(corrupted), provenance="cads")


def baseline_negative(x_t: Tensor, t: float, cond: ConditionEmbedding | None,
                      model: ToyModel, method: str,
                      layer_range: tuple[int, int] | None = None,
                      weak_model: ToyModel | None = None) -> Tensor:
    """Negative branch for pag/seg/autoguidance, same conditioning as positive."""
    if method in ("pag", "seg"):
        lo, hi = layer_range if layer_range is not None else (0, model.denoiser.depth)
        mode = "identity" if method == "pag" else "smoothing"
        rect = RectificationConfig(mode=mode, layer_lo=lo, layer_hi=hi)
        return denoiser_forward(x_t, t, cond, model, rect)
    if method == "autoguidance":
        if weak_model is None:
            raise ValueError("autoguidance requires a weak checkpoint")
        return denoiser_forward(x_t, t, cond, weak_model)
    raise ValueError(f"no baseline negative for method {method!r}")


# ---------------------------------------------------------------------------
# per-trajectory dispatch


class GuidanceSession:
    """Owns everything guidance reuses across one trajectory (batch).

    Prompt embeddings (clean and temperature-rescaled) are computed once;
    APG momentum and the per-sample CADS noise streams live here. Safe for a
    single trajectory only; build a new session per batch.
    """

    def __init__(self, model: ToyModel, spec: GuidanceSpec,
                 prompt_tokens: np.ndarray | None = None,
                 weak_model: ToyModel | None = None,
                 cads_rngs: list[np.random.Generator] | None = None):
        spec.erg.rect.validate_depth(model.denoiser.depth)
        if not 0 <= spec.erg.enc_lo <= spec.erg.enc_hi <= model.encoder.depth:
            raise ValueError(
                f"encoder range [{spec.erg.enc_lo}, {spec.erg.enc_hi}) outside depth "
                f"{model.encoder.depth}")
        if spec.method == "autoguidance" and weak_model is None:
            raise ValueError("autoguidance requires a weak model")
        self.model = model
        self.spec = spec
        self.weak_model = weak_model
        self.cads_rngs = cads_rngs
        self.apg_state = ApgState()

        if prompt_tokens is not None:
            self.phi_c = encoder_forward(prompt_tokens, model.params, model.encoder)
        else:
            self.phi_c = None
        self.cond_rectified = False
        self.phi_tau = self.phi_c
        if spec.method in ERG_METHODS and prompt_tokens is not None:
            erg = spec.erg
            if erg.tau_c != 1.0 and erg.enc_lo < erg.enc_hi:
                self.phi_tau = encoder_forward(prompt_tokens, model.params, model.encoder,
                                               tau_c=erg.tau_c, lo=erg.enc_lo, hi=erg.enc_hi)
                self.cond_rectified = True
        self.weak_equals_strong = bool(
            weak_model is not None
            and weak_model.params.keys() == model.params.keys()
            and all(np.array_equal(weak_model.params[k].array, model.params[k].array)
                    for k in model.params)
        )

    # -- helpers

    def _forward(self, x_t: Tensor, t: float, cond, rect=RectificationConfig.off()) -> Tensor:
        return denoiser_forward(x_t, t, cond, self.model, rect)

    def _cads_condition(self, t: float) -> ConditionEmbedding:
        base = self.phi_c
        if base is None:
            from .models import null_condition

            base = null_condition(self.model.params, self.model.encoder)
        if self.cads_rngs is None:
            raise ValueError("cads requires per-sample RNG substreams")
        per_sample = [cads_corrupt(base, t, self.spec.cads, rng).tokens.array
                      for rng in self.cads_rngs]
        return ConditionEmbedding(tokens=Tensor(np.stack(per_sample)), provenance="cads")

    def _rect_active(self, t: float) -> bool:
        return t > self.spec.erg.kappa and not self.spec.erg.rect.is_noop()

    # -- the per-step velocity

    def velocity(self, x_t: Tensor, t: float, record: list | None = None) -> Tensor:
        spec = self.spec
        method = spec.method

        def done(pos: Tensor, neg: Tensor, out: Tensor) -> Tensor:
            if record is not None:
                record.append((pos.array, neg.array))
            return out

        if method == "none" or spec.w == 1.0:
            pos = self._forward(x_t, t, self.phi_c)
            return done(pos, pos, pos)

        if method == "cfg":
            if self.phi_c is None:
                pos = self._forward(x_t, t, None)
                return done(pos, pos, pos)
            pos = self._forward(x_t, t, self.phi_c)
            neg = self._forward(x_t, t, None)
            return done(pos, neg, combine_cfg(pos, neg, spec.w))

        if method == "apg":
            if self.phi_c is None:
                pos = self._forward(x_t, t, None)
                return done(pos, pos, pos)
            pos = self._forward(x_t, t, self.phi_c)
            neg = self._forward(x_t, t, None)
            return done(pos, neg, self._apg_combine(x_t, t, pos, neg))

        if method == "cads":
            pos = self._forward(x_t, t, self._cads_condition(t))
            neg = self._forward(x_t, t, None)
            return done(pos, neg, combine_cfg(pos, neg, spec.w))

        if method in ("pag", "seg", "autoguidance"):
            pos = self._forward(x_t, t, self.phi_c)
            rect = spec.erg.rect
            if method in ("pag", "seg") and rect.layer_lo >= rect.layer_hi:
                return done(pos, pos, pos)
            if method == "autoguidance" and self.weak_equals_strong:
                return done(pos, pos, pos)
            neg = baseline_negative(x_t, t, self.phi_c, self.model, method,
                                    layer_range=(rect.layer_lo, rect.layer_hi),
                                    weak_model=self.weak_model)
            return done(pos, neg, combine_cfg(pos, neg, spec.w))

        # erg family
        rect_active = self._rect_active(t)
        branches_equal = not rect_active and not self.cond_rectified
        if method == "erg_cads":
            pos = self._forward(x_t, t, self._cads_condition(t))
            branches_equal = False
        else:
            pos = self._forward(x_t, t, self.phi_c)
        if branches_equal:
            return done(pos, pos, pos)
        rect = spec.erg.rect if rect_active else RectificationConfig.off()
        neg = self._forward(x_t, t, self.phi_tau, rect)
        if method == "erg_apg":
            return done(pos, neg, self._apg_combine(x_t, t, pos, neg))
        return done(pos, neg, combine_cfg(pos, neg, spec.w))

    def _apg_combine(self, x_t: Tensor, t: float, pos: Tensor, neg: Tensor) -> Tensor:
        pos_clean = velocity_to_clean(x_t, pos, t)
        neg_clean = velocity_to_clean(x_t, neg, t)
        guided = apg_update(pos_clean, neg_clean, self.spec.w, self.spec.apg, self.apg_state)
        return clean_to_velocity(x_t, guided, t)


def erg_velocity(x_t: Tensor, t: float, prompt_tokens, model: ToyModel,
                 spec: GuidanceSpec, session: GuidanceSession | None = None) -> Tensor:
    """One guided-velocity evaluation for the erg family.

    Pass a :class:`GuidanceSession` to reuse the per-trajectory embeddings;
    otherwise one is built for this call.
    """
    if spec.method not in ERG_METHODS:
        raise ValueError(f"erg_velocity requires an erg-family method, got {spec.method!r}")
    if session is None:
        session = GuidanceSession(model, spec, prompt_tokens)
    return session.velocity(x_t, t)
