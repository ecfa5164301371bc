"""Pre-attention group routing.

For each KV group the router reads only the cached anchor key, scores the
group's query heads by cosine against it, and compares the mean score with
the length-dependent threshold. Sink groups get an all-zero output and never
touch their K/V history; active groups run split-K attention over the full
cache.
"""

from __future__ import annotations

import contextlib
import enum
import time
from concurrent.futures import Executor
from dataclasses import dataclass, field

import numpy as np

from .attention import DEFAULT_BLOCK, splitk_from_loader
from .counters import LoadCounters
from .kv_cache import GroupAnchor, KvCache
from .profile import DEFAULT_GAMMA, ThresholdProfile, threshold_for_length

MIN_QUERY_NORM = 1e-12

_FAULTS: set[str] = set()
KNOWN_FAULTS = ("tie-breaking",)


@contextlib.contextmanager
def inject_fault(name: str):
    """Test hook: deliberately break one routing rule for the duration of the block."""
    if name not in KNOWN_FAULTS:
        raise ValueError(f"unknown fault {name!r}; known: {KNOWN_FAULTS}")
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


class Verdict(str, enum.Enum):
    SINK = "sink"
    ACTIVE = "active"


@dataclass
class RoutingConfig:
    profile: ThresholdProfile
    gamma: float = DEFAULT_GAMMA
    excluded_layers: frozenset[int] = field(default_factory=lambda: frozenset({0, 1}))

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        self.excluded_layers = frozenset(int(i) for i in self.excluded_layers)
        if any(i < 0 for i in self.excluded_layers):
            raise ValueError(f"invalid excluded layers {sorted(self.excluded_layers)}")

    @classmethod
    def from_profile(cls, profile: ThresholdProfile) -> "RoutingConfig":
        return cls(profile, profile.gamma, frozenset(profile.excluded_layers))


@dataclass
class RouteDecision:
    layer: int
    group_score: float
    threshold: float
    verdict: Verdict
    kv_head: int = -1
    head_scores: np.ndarray | None = None
    degenerate: bool = False
    excluded: bool = False


def proxy_score(q, anchor: GroupAnchor) -> float:
    """cos(q, k0); a query with near-zero norm scores 0."""
    scores, _ = head_scores(np.asarray(q)[None, :], anchor)
    return float(scores[0])


def _cosines(q, k0, k0_norm) -> tuple[np.ndarray, np.ndarray]:
    """q [G, r, D] against k0 [G, D] with norms [G]; returns scores [G, r] and a degenerate mask."""
    q = np.asarray(q, dtype=np.float64)
    qn = np.sqrt(np.einsum("grd,grd->gr", q, q))
    dots = np.einsum("grd,gd->gr", q, np.asarray(k0, dtype=np.float64))
    degenerate = qn < MIN_QUERY_NORM
    with np.errstate(divide="ignore", invalid="ignore"):
        s = dots / (qn * np.asarray(k0_norm, dtype=np.float64)[:, None])
    s = np.where(degenerate, 0.0, np.clip(s, -1.0, 1.0))
    return s, degenerate


def head_scores(queries, anchor: GroupAnchor) -> tuple[np.ndarray, np.ndarray]:
    """Cosine of each query row against the anchor, plus a mask of degenerate rows."""
    s, degenerate = _cosines(np.asarray(queries)[None], anchor.k0[None], [anchor.k0_norm])
    return s[0], degenerate[0]


def group_score(scores, r: int | None = None) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if r is not None and scores.size != r:
        raise ValueError(f"expected {r} head scores, got {scores.size}")
    if scores.size == 0:
        raise ValueError("no head scores to aggregate")
    return float(scores.mean())


def route(layer: int, score: float, length: int, config: RoutingConfig, tau: float | None = None) -> RouteDecision:
    """Sink iff score > tau(length) on a routable layer; ``tau`` may be passed in precomputed."""
    if tau is None:
        tau = threshold_for_length(length, config.profile)
    excluded = layer in config.excluded_layers
    if "tie-breaking" in _FAULTS:
        sink = score >= tau
    else:
        sink = score > tau
    verdict = Verdict.SINK if sink and not excluded else Verdict.ACTIVE
    return RouteDecision(layer=layer, group_score=score, threshold=tau, verdict=verdict, excluded=excluded)


def routed_decode_step(layer: int, queries, cache: KvCache, config: RoutingConfig, *,
                       num_splits: int = 1, block_size: int = DEFAULT_BLOCK,
                       executor: Executor | None = None, observe: bool = False,
                       ) -> tuple[np.ndarray, list[RouteDecision], LoadCounters]:
    """One layer of one decode step over all KV groups.

    ``queries`` is [H_q, D]; head ``h`` belongs to group ``h // r``. With
    ``observe=True`` decisions are recorded but every group runs attention
    (score collection for calibration).
    """
    cfg = cache.config
    q_all = np.asarray(queries, dtype=np.float32)
    if q_all.shape != (cfg.num_q_heads, cfg.head_dim):
        raise ValueError(f"expected queries [{cfg.num_q_heads}, {cfg.head_dim}], got {q_all.shape}")
    if not 0 <= layer < cfg.num_layers:
        raise IndexError(f"layer {layer} out of range [0, {cfg.num_layers})")
    r = cfg.group_size
    out = np.zeros_like(q_all)
    decisions: list[RouteDecision] = []
    counters = LoadCounters()

    t0 = time.perf_counter()
    k0, k0_norm = cache.layer_anchors(layer, counters)
    scores, degenerate = _cosines(q_all.reshape(cfg.num_kv_heads, r, cfg.head_dim), k0, k0_norm)
    group = scores.mean(axis=1).tolist()
    lengths = cache.layer_lengths(layer)
    taus = {n: threshold_for_length(n, config.profile) for n in set(lengths)}
    for g in range(cfg.num_kv_heads):
        decision = route(layer, group[g], lengths[g], config, taus[lengths[g]])
        decision.kv_head = g
        decision.head_scores = scores[g]
        if degenerate[g].any():
            decision.degenerate = True
            decision.verdict = Verdict.ACTIVE
        decisions.append(decision)
    counters.wall_time["routing"] += time.perf_counter() - t0

    for g, decision in enumerate(decisions):
        if decision.verdict is Verdict.SINK and not observe:
            counters.groups_skipped += 1
            continue
        q = q_all[g * r:(g + 1) * r]
        length = lengths[g]

        def load(start, stop, c, _g=g):
            return cache.historical_view(layer, _g, start, stop, c)

        o, c = splitk_from_loader(q, length, load, min(num_splits, length), block_size, executor=executor)
        out[g * r:(g + 1) * r] = o
        counters.merge(c)
        counters.groups_active += 1

    return out, decisions, counters


def dense_decode_step(layer: int, queries, cache: KvCache, *, num_splits: int = 1,
                      block_size: int = DEFAULT_BLOCK, executor: Executor | None = None,
                      ) -> tuple[np.ndarray, LoadCounters]:
    """Baseline: split-K attention for every group, no anchor reads."""
    cfg = cache.config
    q_all = np.asarray(queries, dtype=np.float32)
    r = cfg.group_size
    out = np.zeros_like(q_all)
    counters = LoadCounters()
    for g in range(cfg.num_kv_heads):
        length = cache.length(layer, g)

        def load(start, stop, c, _g=g):
            return cache.historical_view(layer, _g, start, stop, c)

        o, c = splitk_from_loader(q_all[g * r:(g + 1) * r], length, load, min(num_splits, length),
                                  block_size, executor=executor)
        out[g * r:(g + 1) * r] = o
        counters.merge(c)
        counters.groups_active += 1
    return out, counters


def skip_ratio(decisions) -> float:
    """Fraction of Sink verdicts among routable (non-excluded) decisions."""
    routable = [d for d in decisions if not d.excluded]
    if not routable:
        return 0.0
    return sum(d.verdict is Verdict.SINK for d in routable) / len(routable)
