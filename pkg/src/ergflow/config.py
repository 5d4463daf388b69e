"""Complete, JSON-round-trippable run configuration.

One RunConfig captures everything a run needs: dataset, model shapes,
training, sampling, guidance, and metrics. Every experiment directory stores
the exact config used, so re-running it reproduces outputs bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .attention import RectificationConfig
from .data import DatasetSpec, ModeSpec, default_spec
from .guidance import ApgParams, CadsParams, ErgParams, GuidanceSpec
from .metrics import MetricsConfig
from .models import DenoiserConfig, EncoderConfig
from .sampler import SamplerConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Configuration file/flag problem; maps to CLI exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=default_spec)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    out_dir: str = "runs/default"
    seed: int = 0


def _build(cls, payload: dict, section: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{section}: expected an object, got {type(payload).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {unknown}")
    try:
        return cls(**payload)
    except TypeError as e:
        missing = sorted(names - set(payload) - {
            f.name for f in dataclasses.fields(cls)
            if f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
        })
        if missing:
            raise ConfigError(f"{section}: missing field(s) {missing}") from e
        raise ConfigError(f"{section}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"{section}: {e}") from e


def _dataset_from_dict(payload: dict) -> DatasetSpec:
    if not isinstance(payload, dict):
        raise ConfigError("dataset: expected an object")
    payload = dict(payload)
    if payload.pop("preset", None) == "default" or "modes" not in payload:
        extra = sorted(set(payload) - {"per_mode", "seed"})
        if extra:
            raise ConfigError(f"dataset: preset accepts only per_mode/seed, got {extra}")
        return default_spec(per_mode=payload.get("per_mode", 512), seed=payload.get("seed", 0))
    modes = []
    for i, m in enumerate(payload["modes"]):
        for key in ("id", "center", "radius", "intensity"):
            if key not in m:
                raise ConfigError(f"dataset.modes[{i}]: missing field ['{key}']")
        unknown = sorted(set(m) - {"id", "center", "radius", "intensity"})
        if unknown:
            raise ConfigError(f"dataset.modes[{i}]: unknown field(s) {unknown}")
        modes.append(ModeSpec(id=int(m["id"]), center=tuple(m["center"]),
                              radius=float(m["radius"]), intensity=float(m["intensity"])))
    payload["modes"] = tuple(modes)
    return _build(DatasetSpec, payload, "dataset")


def _guidance_from_dict(payload: dict) -> GuidanceSpec:
    if not isinstance(payload, dict):
        raise ConfigError("guidance: expected an object")
    payload = dict(payload)
    if "erg" in payload:
        erg = dict(payload["erg"])
        if "rect" in erg:
            erg["rect"] = _build(RectificationConfig, erg["rect"], "guidance.erg.rect")
        payload["erg"] = _build(ErgParams, erg, "guidance.erg")
    if "apg" in payload:
        payload["apg"] = _build(ApgParams, payload["apg"], "guidance.apg")
    if "cads" in payload:
        payload["cads"] = _build(CadsParams, payload["cads"], "guidance.cads")
    return _build(GuidanceSpec, payload, "guidance")


def from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"config: unknown field(s) {unknown}")
    kwargs = {}
    if "dataset" in payload:
        kwargs["dataset"] = _dataset_from_dict(payload["dataset"])
    if "denoiser" in payload:
        kwargs["denoiser"] = _build(DenoiserConfig, payload["denoiser"], "denoiser")
    if "encoder" in payload:
        kwargs["encoder"] = _build(EncoderConfig, payload["encoder"], "encoder")
    if "train" in payload:
        kwargs["train"] = _build(TrainConfig, payload["train"], "train")
    if "sampler" in payload:
        kwargs["sampler"] = _build(SamplerConfig, payload["sampler"], "sampler")
    if "guidance" in payload:
        kwargs["guidance"] = _guidance_from_dict(payload["guidance"])
    if "metrics" in payload:
        kwargs["metrics"] = _build(MetricsConfig, payload["metrics"], "metrics")
    if "out_dir" in payload:
        kwargs["out_dir"] = str(payload["out_dir"])
    if "seed" in payload:
        kwargs["seed"] = int(payload["seed"])
    cfg = RunConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-section consistency checks."""
    rect = cfg.guidance.erg.rect
    if rect.layer_hi > cfg.denoiser.depth:
        raise ConfigError(
            f"guidance.erg.rect: layer range [{rect.layer_lo}, {rect.layer_hi}) exceeds "
            f"denoiser depth {cfg.denoiser.depth}")
    if cfg.guidance.erg.enc_hi > cfg.encoder.depth:
        raise ConfigError(
            f"guidance.erg: encoder range [{cfg.guidance.erg.enc_lo}, "
            f"{cfg.guidance.erg.enc_hi}) exceeds encoder depth {cfg.encoder.depth}")
    if cfg.denoiser.cond_tokens != cfg.encoder.max_len:
        raise ConfigError(
            f"denoiser.cond_tokens ({cfg.denoiser.cond_tokens}) must equal "
            f"encoder.max_len ({cfg.encoder.max_len})")
    if cfg.dataset.image_side != cfg.denoiser.image_side:
        raise ConfigError(
            f"dataset.image_side ({cfg.dataset.image_side}) must equal "
            f"denoiser.image_side ({cfg.denoiser.image_side})")


def to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["dataset"]["modes"] = [
        {"id": m["id"], "center": list(m["center"]), "radius": m["radius"],
         "intensity": m["intensity"]}
        for m in d["dataset"]["modes"]
    ]
    return d


def load(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path) as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") \
            from e
    return from_dict(payload)


def save(cfg: RunConfig, path: str | os.PathLike) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=1, sort_keys=True)
        f.write("\n")


def override(cfg: RunConfig, path: str, value) -> RunConfig:
    """Replace one dotted-path field (e.g. 'guidance.erg.tau_c') and revalidate."""
    d = to_dict(cfg)
    parts = path.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node:
            raise ConfigError(f"unknown config path {path!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config path {path!r}")
    node[parts[-1]] = value
    return from_dict(d)
