"""Diagnostic studies over a trained model.

Three probes of how guidance shapes sampling:
  * variance_study - per-location variance of the initial (t=0) velocity
    under the null-condition and rectified-condition negative branches, and
    of their difference to the clean conditional velocity;
  * decomposition_trace - norms of the parallel/orthogonal parts of
    (v_pos - v_neg) along a recorded trajectory;
  * certainty_profile - per-block fraction of image-token attention rows
    whose max probability exceeds a threshold.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .guidance import ErgParams
from .models import ToyModel, denoiser_forward, encoder_forward
from .rng import normal32, substream
from .sampler import Trajectory
from .tensor import Tensor

HIST_BINS = 50


@dataclass(frozen=True)
class VarianceSeries:
    values: np.ndarray          # one variance per spatial/channel location
    hist_counts: np.ndarray     # HIST_BINS uniform bins over [0, max]
    hist_edges: np.ndarray

    @classmethod
    def from_values(cls, values: np.ndarray) -> "VarianceSeries":
        values = np.asarray(values, dtype=np.float64)
        top = float(values.max()) if values.size and values.max() > 0 else 1.0
        counts, edges = np.histogram(values, bins=HIST_BINS, range=(0.0, top))
        return cls(values=values, hist_counts=counts, hist_edges=edges)


@dataclass(frozen=True)
class VarianceReport:
    marginal: dict[str, VarianceSeries]      # negative-branch variant -> series
    conditional: dict[str, VarianceSeries]


@dataclass(frozen=True)
class DecompositionTrace:
    times: np.ndarray
    parallel_norms: np.ndarray
    orthogonal_norms: np.ndarray
    diff_norms: np.ndarray
    zero_positive_steps: tuple[int, ...]     # steps where |v_pos| = 0 (par set to 0)


@dataclass(frozen=True)
class CertaintyProfile:
    fractions: np.ndarray                    # one entry per block, in [0, 1]
    threshold: float


# ---------------------------------------------------------------------------


def variance_study(model: ToyModel, erg: ErgParams, prompts: list[np.ndarray],
                   n_seeds: int, seed: int = 0, forward=denoiser_forward) -> VarianceReport:
    """Initial-velocity variances over noise draws and prompts at t = 0.

    For each negative-branch variant ("null" = no condition, "rectified" =
    temperature-rescaled embedding), reports the per-location variance of the
    branch velocity (marginal) and of its difference to the clean conditional
    velocity (conditional).
    """
    if n_seeds < 2:
        raise ValueError("need at least 2 seeds for a variance")
    s = model.denoiser.image_side
    branch_vs: dict[str, list[np.ndarray]] = {"null": [], "rectified": []}
    diff_vs: dict[str, list[np.ndarray]] = {"null": [], "rectified": []}

    for pi, prompt in enumerate(prompts):
        phi_c = encoder_forward(prompt, model.params, model.encoder)
        if erg.tau_c != 1.0 and erg.enc_lo < erg.enc_hi:
            phi_tau = encoder_forward(prompt, model.params, model.encoder,
                                      tau_c=erg.tau_c, lo=erg.enc_lo, hi=erg.enc_hi)
        else:
            phi_tau = phi_c
        x0 = np.stack([normal32(substream(seed, pi, si), (1, s, s)) for si in range(n_seeds)])
        x0_t = Tensor(x0)
        v_cond = forward(x0_t, 0.0, phi_c, model).array.reshape(n_seeds, -1)
        for name, cond in (("null", None), ("rectified", phi_tau)):
            v = forward(x0_t, 0.0, cond, model).array.reshape(n_seeds, -1)
            branch_vs[name].append(v)
            diff_vs[name].append(v_cond - v)

    marginal = {}
    conditional = {}
    for name in ("null", "rectified"):
        branch = np.concatenate(branch_vs[name], axis=0).astype(np.float64)
        diff = np.concatenate(diff_vs[name], axis=0).astype(np.float64)
        marginal[name] = VarianceSeries.from_values(branch.var(axis=0, ddof=1))
        conditional[name] = VarianceSeries.from_values(diff.var(axis=0, ddof=1))
    return VarianceReport(marginal=marginal, conditional=conditional)


def decomposition_trace(traj: Trajectory) -> DecompositionTrace:
    """Project d = v_pos - v_neg onto v_pos at every recorded step."""
    if not traj.pos_velocities or len(traj.pos_velocities) != len(traj.neg_velocities):
        raise ValueError("trajectory must carry recorded positive/negative velocities")
    par_norms, orth_norms, diff_norms = [], [], []
    flagged = []
    for k, (vp, vn) in enumerate(zip(traj.pos_velocities, traj.neg_velocities)):
        vp = vp.astype(np.float64).reshape(-1)
        d = vp - vn.astype(np.float64).reshape(-1)
        pp = float(vp @ vp)
        if pp == 0.0:
            par = np.zeros_like(d)
            flagged.append(k)
        else:
            par = (float(d @ vp) / pp) * vp
        orth = d - par
        par_norms.append(np.linalg.norm(par))
        orth_norms.append(np.linalg.norm(orth))
        diff_norms.append(np.linalg.norm(d))
    return DecompositionTrace(
        times=np.asarray(traj.times[: len(par_norms)]),
        parallel_norms=np.asarray(par_norms),
        orthogonal_norms=np.asarray(orth_norms),
        diff_norms=np.asarray(diff_norms),
        zero_positive_steps=tuple(flagged),
    )


def certainty_fractions(probs: np.ndarray, threshold: float,
                        img_tokens: int | None = None) -> float:
    """Fraction of (batch, head, query-row) entries with max probability above
    the threshold; rows beyond img_tokens are ignored."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    rows = probs if img_tokens is None else probs[:, :, :img_tokens]
    return float((rows.max(axis=-1) > threshold).mean())


def profile_from_captures(captures: list[np.ndarray], threshold: float,
                          img_tokens: int | None = None) -> CertaintyProfile:
    fr = np.array([certainty_fractions(p, threshold, img_tokens) for p in captures])
    return CertaintyProfile(fractions=fr, threshold=threshold)


def certainty_profile(model: ToyModel, x_t: Tensor, t: float,
                      threshold: float = 0.95) -> CertaintyProfile:
    """Forward once with standard attention and profile the captured
    image-token attention rows of every block."""
    captures: list[np.ndarray] = []
    denoiser_forward(x_t, t, None, model, capture=captures)
    return profile_from_captures(captures, threshold, img_tokens=model.denoiser.img_tokens)


# ---------------------------------------------------------------------------
# report export: CSV of the series plus a JSON summary


def _summary(series: dict[str, np.ndarray]) -> dict:
    return {
        name: {"min": float(np.min(v)), "median": float(np.median(v)), "max": float(np.max(v))}
        for name, v in series.items()
    }


def _export(out_prefix: str | os.PathLike, columns: dict[str, np.ndarray],
            extra: dict | None = None) -> tuple[str, str]:
    csv_path, json_path = f"{out_prefix}.csv", f"{out_prefix}.json"
    names = list(columns)
    length = max(len(v) for v in columns.values())
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index"] + names)
        for i in range(length):
            writer.writerow([i] + [f"{columns[n][i]:.8g}" if i < len(columns[n]) else ""
                                   for n in names])
    payload = {"summary": _summary(columns)}
    if extra:
        payload.update(extra)
    with open(json_path, "w") as f:
        json.dump(payload, f, indent=1)
    return csv_path, json_path


def export_variance_report(report: VarianceReport, out_prefix) -> tuple[str, str]:
    columns = {}
    hists = {}
    for kind, table in (("marginal", report.marginal), ("conditional", report.conditional)):
        for name, series in table.items():
            key = f"{kind}_{name}"
            columns[key] = series.values
            hists[key] = {"counts": series.hist_counts.tolist(),
                          "edges": series.hist_edges.tolist()}
    return _export(out_prefix, columns, extra={"histograms": hists})


def export_decomposition_trace(trace: DecompositionTrace, out_prefix) -> tuple[str, str]:
    columns = {
        "time": trace.times,
        "parallel": trace.parallel_norms,
        "orthogonal": trace.orthogonal_norms,
        "difference": trace.diff_norms,
    }
    return _export(out_prefix, columns,
                   extra={"zero_positive_steps": list(trace.zero_positive_steps)})


def export_certainty_profile(profile: CertaintyProfile, out_prefix) -> tuple[str, str]:
    return _export(out_prefix, {"fraction": profile.fractions},
                   extra={"threshold": profile.threshold})
