"""Threshold calibration: sweep, per-length solve, cubic fit over normalized length."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .profile import (DEFAULT_GAMMA, DEFAULT_TARGET_SKIP, CalibrationPoint, ThresholdProfile,
                      load_profile, save_profile, threshold_for_length)
from .router import RoutingConfig, routed_decode_step
from .workload import WorkloadSpec, generate_workload

__all__ = [
    "ScorePopulation", "CubicFit", "CalibrationResult", "sweep", "skip_at", "solve_threshold",
    "fit_cubic", "collect_scores", "calibrate", "save_profile", "load_profile",
]

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 50


class RankDeficientError(ValueError):
    pass


@dataclass
class ScorePopulation:
    scores: np.ndarray
    layers: np.ndarray = None
    lengths: np.ndarray = None   # nominal calibration length
    contexts: np.ndarray = None  # cache length the router saw when scoring

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        n = self.scores.size
        self.layers = np.full(n, -1) if self.layers is None else np.asarray(self.layers).ravel()
        self.lengths = np.full(n, -1) if self.lengths is None else np.asarray(self.lengths).ravel()
        self.contexts = self.lengths.copy() if self.contexts is None else np.asarray(self.contexts).ravel()
        if not self.layers.size == self.lengths.size == self.contexts.size == n:
            raise ValueError("scores, layers, lengths and contexts must have equal length")
        if n and (self.scores.min() < -1.0 or self.scores.max() > 1.0):
            raise ValueError("group scores must lie in [-1, 1]")

    def __len__(self):
        return self.scores.size

    def at_length(self, length: int) -> "ScorePopulation":
        m = self.lengths == length
        return ScorePopulation(self.scores[m], self.layers[m], self.lengths[m], self.contexts[m])


def _nonempty(pop: ScorePopulation) -> np.ndarray:
    if len(pop) == 0:
        raise ValueError("score population is empty")
    return pop.scores


def skip_at(pop: ScorePopulation, tau: float) -> float:
    s = _nonempty(pop)
    return float(np.count_nonzero(s > tau)) / s.size


def routed_skip(pop: ScorePopulation, profile: ThresholdProfile) -> float:
    """Skip ratio the router realizes: each score is compared with tau at its own context length."""
    s = _nonempty(pop)
    taus = np.array([threshold_for_length(int(n), profile) for n in pop.contexts])
    return float(np.count_nonzero(s > taus)) / s.size


def sweep(pop: ScorePopulation, thresholds) -> list[tuple[float, float]]:
    """Skip ratio (fraction of scores strictly above tau) for each threshold."""
    s = np.sort(_nonempty(pop))
    taus = np.asarray(list(thresholds), dtype=np.float64)
    above = s.size - np.searchsorted(s, taus, side="right")
    return [(float(t), float(a) / s.size) for t, a in zip(taus, above)]


def solve_threshold(pop: ScorePopulation, target_skip: float) -> float:
    """Threshold whose strict-greater skip ratio is closest to ``target_skip``.

    Candidates are every distinct score plus one value just below the
    minimum. Ties in distance go to the lower threshold, which gives the
    lower empirical quantile when ``n * (1 - target)`` is an integer.
    """
    if not 0.0 <= target_skip <= 1.0:
        raise ValueError(f"target_skip must be in [0, 1], got {target_skip}")
    s = np.sort(_nonempty(pop))
    distinct = np.unique(s)
    candidates = np.concatenate([[np.nextafter(distinct[0], -np.inf)], distinct])
    skips = (s.size - np.searchsorted(s, candidates, side="right")) / s.size
    err = np.abs(skips - target_skip)
    best = np.flatnonzero(err <= err.min() + 1e-12)[0]
    return float(candidates[best])


@dataclass
class CubicFit:
    coefficients: tuple[float, float, float, float]
    residual: float  # sum of squared residuals

    def __call__(self, x):
        a, b, c, d = self.coefficients
        x = np.asarray(x, dtype=np.float64)
        return ((a * x + b) * x + c) * x + d


def _solve_pivoted(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting."""
    a = a.astype(np.float64).copy()
    b = b.astype(np.float64).copy()
    n = b.size
    scale = np.abs(a).max()
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[piv, col]) <= 1e-14 * scale:
            raise RankDeficientError("normal equations are singular")
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        for row in range(col + 1, n):
            f = a[row, col] / a[col, col]
            a[row, col:] -= f * a[col, col:]
            b[row] -= f * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1:] @ x[row + 1:]) / a[row, row]
    return x


def fit_cubic(points) -> CubicFit:
    """Least-squares tau(x) = a x^3 + b x^2 + c x + d via the 4x4 normal equations."""
    pts = np.asarray(list(points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (x, tau) pairs")
    x, y = pts[:, 0], pts[:, 1]
    if np.unique(x).size < 4:
        raise RankDeficientError(f"cubic fit needs >= 4 distinct x values, got {np.unique(x).size}")
    design = np.stack([x ** 3, x ** 2, x, np.ones_like(x)], axis=1)
    coef = _solve_pivoted(design.T @ design, design.T @ y)
    resid = design @ coef - y
    return CubicFit(tuple(float(c) for c in coef), float(resid @ resid))


def collect_scores(spec: WorkloadSpec, length: int, samples: int, config: RoutingConfig,
                   num_splits: int = 1) -> ScorePopulation:
    """Run ``samples`` observe-mode decode steps and gather routable group scores."""
    spec = replace(spec, steps=samples)
    wl = generate_workload(spec, length)
    scores, layers, contexts = [], [], []
    for step in range(samples):
        for layer in range(spec.num_layers):
            wl.append_step(step, layer)
            _, decisions, _ = routed_decode_step(layer, wl.queries[step, layer], wl.cache, config,
                                                 num_splits=num_splits, observe=True)
            for d in decisions:
                if not d.excluded:
                    scores.append(d.group_score)
                    layers.append(layer)
                    contexts.append(wl.cache.length(layer, d.kv_head))
    return ScorePopulation(scores, layers, np.full(len(scores), length), contexts)


@dataclass
class CalibrationResult:
    profile: ThresholdProfile
    fit: CubicFit
    population: ScorePopulation
    rows: list[dict] = field(default_factory=list)  # per-length table


def calibrate(workload: WorkloadSpec, lengths=None, target_skip: float = DEFAULT_TARGET_SKIP,
              gamma: float = DEFAULT_GAMMA, samples: int = DEFAULT_SAMPLES,
              num_splits: int = 1) -> CalibrationResult:
    lengths = tuple(int(n) for n in (lengths or workload.lengths))
    if len(set(lengths)) < 4:
        raise RankDeficientError(f"calibration needs >= 4 distinct lengths, got {sorted(set(lengths))}")
    if not 0 < target_skip < 1:
        raise ValueError(f"target_skip must be in (0, 1), got {target_skip}")
    workload = replace(workload, lengths=lengths)
    normalizer = float(max(lengths))
    # observation config: threshold irrelevant, nothing is skipped
    observe_cfg = RoutingConfig(ThresholdProfile.constant(2.0), gamma, workload.excluded_layers)

    pops, points = [], []
    for length in lengths:
        pop = collect_scores(workload, length, samples, observe_cfg, num_splits)
        tau = solve_threshold(pop, target_skip)
        points.append(CalibrationPoint(length, tau, skip_at(pop, tau)))
        pops.append(pop)
        log.info("length %d: %d scores, tau=%.4f, skip=%.4f", length, len(pop), tau, points[-1].skip)

    fit = fit_cubic([(p.length / normalizer, p.tau) for p in points])
    profile = ThresholdProfile(fit.coefficients, normalizer, target_skip=target_skip, gamma=gamma,
                               excluded_layers=workload.excluded_layers, calibration_points=points)
    rows = []
    for p, pop in zip(points, pops):
        tau_fit = threshold_for_length(p.length, profile)
        rows.append({"length": p.length, "tau_solved": p.tau, "skip_solved": p.skip,
                     "tau_fit": tau_fit, "skip_realized": routed_skip(pop, profile)})
    population = ScorePopulation(*(np.concatenate([getattr(p, f) for p in pops])
                                   for f in ("scores", "layers", "lengths", "contexts")))
    return CalibrationResult(profile, fit, population, rows)
