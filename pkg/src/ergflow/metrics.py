"""Sample-set metrics and sweep machinery.

Quality/diversity metrics are the k-NN manifold family (precision, recall,
density, coverage) plus a Gaussian-moment Fréchet distance; consistency is
the fraction of samples landing nearest to their conditioned mode prototype.
Feature space is raw flattened pixels: reference-free and exactly checkable
against brute-force oracles at this scale.

Hyperparameter selection uses per-metric average ranks (lower is better) and
non-dominated Pareto fronts.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata


@dataclass(frozen=True)
class MetricsConfig:
    k: int = 5                     # neighborhood size for manifold metrics
    feature: str = "raw-flatten"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.feature != "raw-flatten":
            raise ValueError(f"unknown feature map {self.feature!r}")


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    density: float
    coverage: float
    frechet: float
    consistency: float

    def __post_init__(self):
        for name in ("precision", "recall", "coverage", "consistency"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.density < 0 or self.frechet < 0:
            raise ValueError("density and frechet must be nonnegative")

    def as_dict(self) -> dict[str, float]:
        return {
            "frechet": self.frechet,
            "precision": self.precision,
            "recall": self.recall,
            "density": self.density,
            "coverage": self.coverage,
            "consistency": self.consistency,
        }


# orientation of every tracked metric when ranking sweep runs
DEFAULT_ORIENTATIONS: dict[str, str] = {
    "frechet": "lower",
    "precision": "higher",
    "recall": "higher",
    "density": "higher",
    "coverage": "higher",
    "consistency": "higher",
}


def flatten_features(images: np.ndarray) -> np.ndarray:
    """Raw-flatten feature map: [n, ...] -> [n, prod(...)], float64."""
    x = np.asarray(images, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def _kth_other_distance(points: np.ndarray, k: int) -> np.ndarray:
    d = cdist(points, points)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def knn_manifold_metrics(real: np.ndarray, fake: np.ndarray, k: int = 5,
                         ) -> tuple[float, float, float, float]:
    """(precision, recall, density, coverage) of fake against real points.

    With r_i the distance from real_i to its k-th nearest other real point
    (f_j analogous among fakes):
      precision = mean_j 1[exists i: |fake_j - real_i| <= r_i]
      density   = (1/(k |fake|)) sum_ij 1[|fake_j - real_i| <= r_i]
      coverage  = mean_i 1[exists j: |fake_j - real_i| <= r_i]
      recall    = mean_i 1[exists j: |real_i - fake_j| <= f_j]
    """
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.ndim == 1:
        real = real[:, None]
    if fake.ndim == 1:
        fake = fake[:, None]
    if len(real) <= k:
        raise ValueError(f"need more than k={k} real points, got {len(real)}")
    if len(fake) <= k:
        raise ValueError(f"need more than k={k} fake points, got {len(fake)}")

    r = _kth_other_distance(real, k)
    f = _kth_other_distance(fake, k)
    between = cdist(fake, real)                       # [m, n]

    hits = between <= r[None, :]
    precision = float(hits.any(axis=1).mean())
    density = float(hits.sum() / (k * len(fake)))
    coverage = float(hits.any(axis=0).mean())
    recall = float((between.T <= f[None, :]).any(axis=1).mean())
    return precision, recall, density, coverage


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root with negative eigenvalues clamped to zero."""
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(real: np.ndarray, fake: np.ndarray) -> float:
    """Moment-matched Fréchet distance between two feature sets."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.ndim == 1:
        real = real[:, None]
    if fake.ndim == 1:
        fake = fake[:, None]
    if len(real) < 2 or len(fake) < 2:
        raise ValueError("need at least 2 samples per set for a covariance")
    mu_r, mu_f = real.mean(axis=0), fake.mean(axis=0)
    cov_r = np.cov(real, rowvar=False).reshape(real.shape[1], real.shape[1])
    cov_f = np.cov(fake, rowvar=False).reshape(fake.shape[1], fake.shape[1])
    s = _psd_sqrt(cov_f)
    cross = _psd_sqrt(s @ cov_r @ s)
    val = float(np.sum((mu_r - mu_f) ** 2) + np.trace(cov_r + cov_f - 2.0 * cross))
    return max(val, 0.0)


def consistency(samples: np.ndarray, conditioned_mode, center_table: dict[int, np.ndarray]) -> float:
    """Fraction of samples whose nearest prototype is the conditioned mode."""
    feats = flatten_features(samples)
    mode_ids = sorted(center_table)
    centers = np.stack([np.asarray(center_table[m], dtype=np.float64) for m in mode_ids])
    cond = np.broadcast_to(np.asarray(conditioned_mode), (len(feats),))
    unknown = set(int(c) for c in cond) - set(mode_ids)
    if unknown:
        raise ValueError(f"unknown mode id(s) {sorted(unknown)}")
    nearest = np.argmin(cdist(feats, centers), axis=1)
    assigned = np.array(mode_ids)[nearest]
    return float((assigned == cond).mean())


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepRun:
    run_id: str
    params: dict
    metrics: dict[str, float]
    orientations: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_ORIENTATIONS))

    @classmethod
    def from_report(cls, run_id: str, params: dict, report: MetricsReport) -> "SweepRun":
        return cls(run_id=run_id, params=dict(params), metrics=report.as_dict())


def rank_score(runs: list[SweepRun]) -> np.ndarray:
    """Average per-metric rank of each run; 1 is best, ties share mean rank."""
    if not runs:
        raise ValueError("no runs to rank")
    orientations = runs[0].orientations
    ranks = np.zeros((len(runs), len(orientations)), dtype=np.float64)
    for j, (metric, orient) in enumerate(sorted(orientations.items())):
        if orient not in ("higher", "lower"):
            raise ValueError(f"orientation for {metric} must be 'higher' or 'lower'")
        try:
            col = np.array([run.metrics[metric] for run in runs], dtype=np.float64)
        except KeyError:
            raise ValueError(f"run missing tracked metric {metric!r}") from None
        ranks[:, j] = rankdata(-col if orient == "higher" else col, method="average")
    return ranks.mean(axis=1)


def pareto_front(points, orientations) -> list[int]:
    """Indices of non-dominated points.

    A point is dropped iff some other point is at least as good on every
    oriented metric and strictly better on at least one; exact duplicates of
    a best point therefore all survive.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("points must be a nonempty list of metric vectors")
    sign = np.array([1.0 if o == "higher" else -1.0 for o in orientations])
    if sign.shape[0] != pts.shape[1]:
        raise ValueError("one orientation needed per metric")
    oriented = pts * sign
    keep = []
    for i in range(len(oriented)):
        ge = np.all(oriented >= oriented[i], axis=1)
        gt = np.any(oriented > oriented[i], axis=1)
        if not np.any(ge & gt):
            keep.append(i)
    return keep


# ---------------------------------------------------------------------------
# CSV report format

CSV_HEADER = ["run_id", "params_json", "frechet", "precision", "recall",
              "density", "coverage", "consistency"]


def append_metrics_row(path: str | os.PathLike, run_id: str, params: dict,
                       report: MetricsReport) -> None:
    """Append one run's metrics row, creating the file with its header."""
    new = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(CSV_HEADER)
        row = [run_id, json.dumps(params, sort_keys=True)]
        row += [f"{getattr(report, m):.6f}" for m in CSV_HEADER[2:]]
        writer.writerow(row)
