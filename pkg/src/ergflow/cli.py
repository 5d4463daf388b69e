"""Command-line harness: train, sample, eval, sweep, analyze.

Every command takes --config (JSON RunConfig); flags override config fields.
Experiment directories always receive the exact effective config.json, so any
artifact can be reproduced bit-for-bit. Exit codes: 0 success, 2 config
error, 3 runtime numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import metrics as metricsmod
from . import pgm
from .analysis import (
    certainty_profile,
    decomposition_trace,
    export_certainty_profile,
    export_decomposition_trace,
    export_variance_report,
    variance_study,
)
from .config import ConfigError, RunConfig
from .guidance import METHODS
from .models import ToyModel, init_model
from .sampler import SamplerConfig, euler_sample
from .tensor import NonFiniteError, Tensor
from .train import load_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
PARETO_METRICS = ("density", "coverage", "consistency")


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return cfgmod.load(args.config)
    return RunConfig()


def _apply_overrides(cfg: RunConfig, args, mapping: dict[str, str]) -> RunConfig:
    for attr, path in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg = cfgmod.override(cfg, path, value)
    return cfg


def _model_from_checkpoint(path: str, cfg: RunConfig) -> ToyModel:
    base = init_model(cfg.denoiser, cfg.encoder, seed=cfg.seed)
    params = load_checkpoint(path)
    missing = sorted(set(base.params) - set(params))
    extra = sorted(set(params) - set(base.params))
    if missing or extra:
        raise ConfigError(f"checkpoint {path} does not match the configured model "
                          f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, t in params.items():
        if t.shape != base.params[name].shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {t.shape}, "
                              f"config implies {base.params[name].shape}")
    return ToyModel(params=params, denoiser=cfg.denoiser, encoder=cfg.encoder)


def _maybe_weak_model(path: str | None, cfg: RunConfig) -> ToyModel | None:
    return _model_from_checkpoint(path, cfg) if path else None


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _load_config(args)
    cfg = _apply_overrides(cfg, args, {"seed": "train.seed", "steps_override": "train.steps"})
    if args.out:
        cfg = cfgmod.override(cfg, "out_dir", args.out)
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.save(cfg, os.path.join(out_dir, "config.json"))

    dataset = datamod.generate(cfg.dataset)
    model = init_model(cfg.denoiser, cfg.encoder, seed=cfg.seed)
    result = train(model, dataset, cfg.train, out_dir)

    loss_csv = os.path.join(out_dir, "train_loss.csv")
    with open(loss_csv, "w") as f:
        f.write("step,loss\n")
        for i, loss in enumerate(result.losses, start=1):
            f.write(f"{i},{loss:.6f}\n")
    print(f"final checkpoint: {result.checkpoints[-1][1]}")
    print(f"weak (1/16) checkpoint: {result.weak_checkpoint}")
    print(f"loss curve: {loss_csv}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample


def _effective_sample_config(args) -> RunConfig:
    cfg = _load_config(args)
    mapping = {
        "guidance": "guidance.method",
        "w": "guidance.w",
        "tau_i": "guidance.erg.rect.tau",
        "tau_c": "guidance.erg.tau_c",
        "kappa": "guidance.erg.kappa",
        "steps": "sampler.steps",
        "seed": "sampler.seed",
        "weak_ckpt": "guidance.weak_ckpt_path",
    }
    return _apply_overrides(cfg, args, mapping)


def _sample_run(cfg: RunConfig, model: ToyModel, weak: ToyModel | None, modes: list[int],
                per_mode: int, out_dir: str) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Sample per_mode images for each mode; returns (images, mode_ids, file entries)."""
    images, mode_ids, entries = [], [], []
    for mi, mode_id in enumerate(modes):
        if mode_id < 0:
            prompt = None
        else:
            prompt = datamod.prompt_tokens(cfg.dataset.mode_by_id(mode_id), cfg.dataset)
        scfg = SamplerConfig(steps=cfg.sampler.steps, seed=cfg.sampler.seed,
                             batch=per_mode, record_trajectory=False,
                             stream_base=mi * per_mode)
        out, _ = euler_sample(model, cfg.guidance, prompt, scfg, weak_model=weak)
        for i in range(per_mode):
            fname = f"sample_m{mode_id}_{i:04d}.pgm"
            if out_dir:
                pgm.write_pgm(os.path.join(out_dir, fname), out.array[i])
            entries.append({"file": fname, "mode": mode_id, "stream": mi * per_mode + i})
        images.append(out.array)
        mode_ids.extend([mode_id] * per_mode)
    return np.concatenate(images), np.array(mode_ids), entries


def cmd_sample(args) -> int:
    cfg = _effective_sample_config(args)
    if cfg.guidance.method == "autoguidance" and not cfg.guidance.weak_ckpt_path:
        raise ConfigError("autoguidance requires --weak-ckpt (or guidance.weak_ckpt_path)")
    if args.uncond and cfg.guidance.method in ("erg", "erg_apg", "erg_cads") \
            and cfg.guidance.erg.tau_c != 1.0 and cfg.guidance.erg.enc_lo < cfg.guidance.erg.enc_hi:
        raise ConfigError("condition-side temperature (tau_c != 1) needs a conditional run; "
                          "drop --uncond or set --tau-c 1")
    model = _model_from_checkpoint(args.ckpt, cfg)
    weak = _maybe_weak_model(cfg.guidance.weak_ckpt_path, cfg)

    if args.uncond:
        modes = [-1]
    elif args.modes:
        modes = [int(m) for m in args.modes.split(",")]
    else:
        modes = [m.id for m in cfg.dataset.modes]
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    _, _, entries = _sample_run(cfg, model, weak, modes, args.n, out_dir)

    manifest = {
        "guidance": cfgmod.to_dict(cfg)["guidance"],
        "sampler": dataclasses.asdict(cfg.sampler),
        "checkpoint": os.path.abspath(args.ckpt),
        "files": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    cfgmod.save(cfg, os.path.join(out_dir, "config.json"))
    print(f"wrote {len(entries)} images to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _load_sample_dir(samples_dir: str) -> tuple[np.ndarray, np.ndarray]:
    """Images plus conditioned mode ids from a sample/manifest directory."""
    manifest_path = os.path.join(samples_dir, "manifest.json")
    index_path = os.path.join(samples_dir, "index.json")
    if os.path.exists(manifest_path):
        entries = json.load(open(manifest_path))["files"]
    elif os.path.exists(index_path):
        entries = json.load(open(index_path))
    else:
        raise ConfigError(f"{samples_dir}: no manifest.json or index.json")
    if not entries:
        raise ConfigError(f"{samples_dir}: empty sample manifest")
    images = np.stack([pgm.read_pgm(os.path.join(samples_dir, e["file"])) for e in entries])
    modes = np.array([e["mode"] for e in entries])
    return images, modes


def _evaluate(images: np.ndarray, modes: np.ndarray, cfg: RunConfig) -> metricsmod.MetricsReport:
    reference = datamod.generate(cfg.dataset)
    real = np.stack([s.image.array.reshape(-1) for s in reference])
    fake = metricsmod.flatten_features(images)
    precision, recall, density, coverage = metricsmod.knn_manifold_metrics(
        real, fake, k=cfg.metrics.k)
    frechet = metricsmod.frechet_gaussian(real, fake)
    table = datamod.mode_center_table(cfg.dataset)
    conditional = modes[modes >= 0]
    if conditional.size:
        cons = metricsmod.consistency(fake[modes >= 0], conditional, table)
    else:
        cons = 0.0
    return metricsmod.MetricsReport(precision=precision, recall=recall, density=density,
                                    coverage=coverage, frechet=frechet, consistency=cons)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    images, modes = _load_sample_dir(args.samples)
    report = _evaluate(images, modes, cfg)
    run_id = args.run_id or os.path.basename(os.path.normpath(args.samples))
    params = {"samples": os.path.abspath(args.samples)}
    metricsmod.append_metrics_row(args.out, run_id, params, report)
    print(f"{run_id}: " + " ".join(f"{k}={v:.4f}" for k, v in report.as_dict().items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _expand_grid(grid: dict) -> list[dict]:
    keys = sorted(grid)
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise ConfigError(f"grid entry {k!r} must be a nonempty list")
    combos = []
    for values in itertools.product(*(grid[k] for k in keys)):
        combos.append(dict(zip(keys, values)))
    return combos


def _sweep_worker(payload: tuple) -> tuple[str, dict, dict[str, float]]:
    cfg_dict, ckpt, run_id, overrides, per_mode = payload
    cfg = cfgmod.from_dict(cfg_dict)
    for path, value in overrides.items():
        cfg = cfgmod.override(cfg, path, value)
    model = _model_from_checkpoint(ckpt, cfg)
    weak = _maybe_weak_model(cfg.guidance.weak_ckpt_path, cfg)
    modes = [m.id for m in cfg.dataset.modes]
    images, mode_ids, _ = _sample_run(cfg, model, weak, modes, per_mode, out_dir="")
    report = _evaluate(images, mode_ids, cfg)
    return run_id, overrides, report.as_dict()


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    try:
        grid = json.loads(args.grid) if args.grid.lstrip().startswith("{") \
            else json.load(open(args.grid))
    except (json.JSONDecodeError, FileNotFoundError) as e:
        raise ConfigError(f"bad --grid: {e}") from e
    combos = _expand_grid(grid)
    # validate every grid path up front so typos fail before any sampling
    for path in grid:
        cfgmod.override(cfg, path, grid[path][0])

    os.makedirs(args.out, exist_ok=True)
    cfg_dict = cfgmod.to_dict(cfg)
    jobs = max(1, args.jobs)
    env_cap = os.environ.get("ERG_THREADS")
    if env_cap:
        jobs = max(1, min(jobs, int(env_cap)))
    payloads = [(cfg_dict, args.ckpt, f"run_{i:03d}", combo, args.n)
                for i, combo in enumerate(combos)]
    if jobs == 1:
        results = [_sweep_worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_worker, payloads))

    sweep_csv = os.path.join(args.out, "sweep.csv")
    if os.path.exists(sweep_csv):
        os.remove(sweep_csv)
    runs = []
    for run_id, overrides, metric_values in results:
        report = metricsmod.MetricsReport(**metric_values)
        metricsmod.append_metrics_row(sweep_csv, run_id, overrides, report)
        runs.append(metricsmod.SweepRun(run_id=run_id, params=overrides, metrics=metric_values))

    scores = metricsmod.rank_score(runs)
    order = np.argsort(scores, kind="stable")
    ranks_csv = os.path.join(args.out, "ranks.csv")
    with open(ranks_csv, "w") as f:
        f.write("run_id,rank_score,params_json\n")
        for i in order:
            f.write(f"{runs[i].run_id},{scores[i]:.4f},{json.dumps(runs[i].params, sort_keys=True)}\n")

    points = [[r.metrics[m] for m in PARETO_METRICS] for r in runs]
    front = metricsmod.pareto_front(points, ["higher"] * len(PARETO_METRICS))
    pareto_path = os.path.join(args.out, "pareto.json")
    with open(pareto_path, "w") as f:
        json.dump({"metrics": list(PARETO_METRICS),
                   "front": [runs[i].run_id for i in front],
                   "indices": front}, f, indent=1)
    cfgmod.save(cfg, os.path.join(args.out, "config.json"))
    print(f"{len(runs)} runs -> {sweep_csv}")
    print(f"best by rank: {runs[order[0]].run_id} (score {scores[order[0]]:.3f})")
    print(f"pareto front: {[runs[i].run_id for i in front]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    cfg = _load_config(args)
    model = _model_from_checkpoint(args.ckpt, cfg)
    os.makedirs(args.out, exist_ok=True)
    prefix = os.path.join(args.out, args.study)

    if args.study == "variance":
        prompts = [datamod.prompt_tokens(m, cfg.dataset) for m in cfg.dataset.modes]
        report = variance_study(model, cfg.guidance.erg, prompts, n_seeds=args.seeds,
                                seed=cfg.seed)
        paths = export_variance_report(report, prefix)
    elif args.study == "decomposition":
        scfg = SamplerConfig(steps=cfg.sampler.steps, seed=cfg.sampler.seed,
                             batch=args.n, record_trajectory=True)
        prompt = datamod.prompt_tokens(cfg.dataset.modes[0], cfg.dataset)
        guidance = cfg.guidance
        if guidance.method not in ("erg", "cfg", "erg_apg", "erg_cads", "apg"):
            guidance = dataclasses.replace(guidance, method="erg")
        if guidance.w == 1.0:
            guidance = dataclasses.replace(guidance, w=3.0)
        _, traj = euler_sample(model, guidance, prompt, scfg,
                               weak_model=_maybe_weak_model(guidance.weak_ckpt_path, cfg))
        paths = export_decomposition_trace(decomposition_trace(traj), prefix)
    elif args.study == "certainty":
        rng = np.random.default_rng(cfg.seed)
        s = cfg.denoiser.image_side
        x = Tensor(rng.standard_normal((args.n, 1, s, s)).astype(np.float32))
        profile = certainty_profile(model, x, args.t, threshold=args.threshold)
        paths = export_certainty_profile(profile, prefix)
    else:
        raise ConfigError(f"unknown study {args.study!r}")
    print(f"wrote {paths[0]} and {paths[1]}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ergflow",
                                description="toy flow-matching models with rectified-attention guidance")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the toy model and write checkpoints")
    t.add_argument("--config", help="RunConfig JSON path")
    t.add_argument("--out", help="output directory (overrides config out_dir)")
    t.add_argument("--seed", type=int, help="training seed override")
    t.add_argument("--steps-override", dest="steps_override", type=int,
                   help="training step count override")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="sample images under a guidance spec")
    s.add_argument("--config", help="RunConfig JSON path")
    s.add_argument("--ckpt", required=True, help="model checkpoint")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--guidance", choices=list(METHODS), help="guidance method")
    s.add_argument("--w", type=float, help="guidance scale")
    s.add_argument("--tau-i", dest="tau_i", type=float, help="denoiser attention temperature")
    s.add_argument("--tau-c", dest="tau_c", type=float, help="encoder attention temperature")
    s.add_argument("--kappa", type=float, help="denoiser rectification kickoff threshold")
    s.add_argument("--steps", type=int, help="sampler steps")
    s.add_argument("--seed", type=int, help="sampler seed")
    s.add_argument("--n", type=int, default=16, help="images per mode")
    s.add_argument("--modes", help="comma-separated mode ids (default: all)")
    s.add_argument("--uncond", action="store_true", help="sample unconditionally")
    s.add_argument("--weak-ckpt", dest="weak_ckpt", help="weak checkpoint for autoguidance")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="evaluate a sample directory against the dataset")
    e.add_argument("--config", help="RunConfig JSON path")
    e.add_argument("--samples", required=True, help="directory with images + manifest")
    e.add_argument("--out", required=True, help="metrics CSV to append to")
    e.add_argument("--run-id", dest="run_id", help="row identifier (default: dir name)")
    e.set_defaults(fn=cmd_eval)

    w = sub.add_parser("sweep", help="grid sweep: sample + eval per combination")
    w.add_argument("--config", help="RunConfig JSON path")
    w.add_argument("--ckpt", required=True)
    w.add_argument("--grid", required=True,
                   help="JSON object or file: dotted config path -> list of values")
    w.add_argument("--out", required=True, help="sweep output directory")
    w.add_argument("--n", type=int, default=16, help="images per mode per run")
    w.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    w.set_defaults(fn=cmd_sweep)

    a = sub.add_parser("analyze", help="diagnostic studies on a checkpoint")
    a.add_argument("--config", help="RunConfig JSON path")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--study", required=True, choices=["variance", "decomposition", "certainty"])
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--seeds", type=int, default=16, help="noise draws for the variance study")
    a.add_argument("--n", type=int, default=8, help="batch size for trajectory/certainty studies")
    a.add_argument("--t", type=float, default=0.3, help="flow time for the certainty study")
    a.add_argument("--threshold", type=float, default=0.95)
    a.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError, ZeroDivisionError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
