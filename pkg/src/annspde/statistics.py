"""Estimators, confidence intervals, and distribution-comparison statistics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

Z95 = 1.959963984540054
KS_C05 = 1.358


@dataclass
class EstimateReport:
    """A Monte Carlo point estimate with its uncertainty and provenance."""

    name: str
    estimate: float
    stderr: float
    ci_low: float
    ci_high: float
    n: int
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.stderr < 0:
            raise ValueError("stderr must be >= 0")
        if not (self.ci_low <= self.estimate <= self.ci_high):
            raise ValueError("CI must bracket the estimate")

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "estimate": self.estimate,
                "stderr": self.stderr,
                "ci_low": self.ci_low,
                "ci_high": self.ci_high,
                "n": self.n,
                "seed": self.seed,
                "params": self.params,
            }
        )


def wilson_interval(hits: int, n: int, z: float = Z95) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion; always within
    [0, 1]."""
    p = hits / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2.0 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def bernoulli_estimate(
    hits: int, n: int, name: str = "", seed: int = 0, params: dict | None = None
) -> EstimateReport:
    """Proportion estimate with Wilson 95% interval."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= hits <= n:
        raise ValueError(f"hits {hits} outside [0, {n}]")
    p = hits / n
    lo, hi = wilson_interval(hits, n)
    stderr = math.sqrt(p * (1.0 - p) / n)
    # Wilson interval brackets the Wilson center; widen to include p itself.
    return EstimateReport(
        name, p, stderr, min(lo, p), max(hi, p), n, seed, params or {}
    )


def mean_estimate(
    values: np.ndarray, name: str = "", seed: int = 0, params: dict | None = None
) -> EstimateReport:
    """Sample-mean estimate with normal 95% interval (for bounded outcomes
    that are not pure 0/1 proportions)."""
    v = np.asarray(values, dtype=float)
    n = v.size
    if n < 1:
        raise ValueError("need at least one value")
    m = float(v.mean())
    stderr = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EstimateReport(
        name, m, stderr, m - Z95 * stderr, m + Z95 * stderr, n, seed, params or {}
    )


def ks_statistic(sample_a: np.ndarray, sample_b: np.ndarray) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov distance and the 5% significance
    threshold c(0.05) * sqrt((m + n) / (m n)) with c(0.05) = 1.358."""
    a = np.sort(np.asarray(sample_a, dtype=float))
    b = np.sort(np.asarray(sample_b, dtype=float))
    m, n = a.size, b.size
    if m == 0 or n == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / m
    cdf_b = np.searchsorted(b, pooled, side="right") / n
    d = float(np.abs(cdf_a - cdf_b).max())
    threshold = KS_C05 * math.sqrt((m + n) / (m * n))
    return d, threshold


@dataclass
class MomentSupEstimate:
    """The two empirical statistics behind the exponential-weight moment
    bounds: sup over recorded (t, x) of e^(lambda |x|) mean(field^q), and the
    mean over paths of sup over (t, x) of field^q."""

    sup_weighted_mean: float
    mean_sup: float


def moment_sup_estimate(paths, q: float, lam: float = 0.0) -> MomentSupEstimate:
    """Estimate both moment statistics from recorded field snapshots.

    `paths` is a list of per-replicate snapshot lists; each snapshot is a
    LatticeField.  Empty input gives zeros.
    """
    if q <= 0:
        raise ValueError("q must be positive")
    if not paths:
        return MomentSupEstimate(0.0, 0.0)
    n_snaps = len(paths[0])
    sup_wm = 0.0
    sups = []
    for snaps in paths:
        path_sup = 0.0
        for f in snaps:
            vq = np.abs(f.values) ** q
            path_sup = max(path_sup, float(vq.max()) if vq.size else 0.0)
        sups.append(path_sup)
    if n_snaps:
        grid = paths[0][0].grid
        w = np.exp(lam * np.abs(grid.centers))
        for k in range(n_snaps):
            mean_q = np.mean([np.abs(p[k].values) ** q for p in paths], axis=0)
            sup_wm = max(sup_wm, float((w * mean_q).max()))
    return MomentSupEstimate(sup_wm, float(np.mean(sups)))
