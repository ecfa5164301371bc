"""Proxy-vs-oracle sample collection for route evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .analysis import PrCurve, operating_point, oracle_labels, pr_curve
from .attention import attention_weights
from .kv_cache import KvCache
from .router import group_score, head_scores
from .workload import Workload

OPERATING_TAU = 0.55
F1_GRID = tuple(round(t, 2) for t in np.arange(-0.5, 1.0001, 0.05))


@dataclass
class ProxySamples:
    scores: np.ndarray   # group-level cosine proxy
    alpha0: np.ndarray   # group-mean full-attention mass on token 0
    layers: np.ndarray
    kv_heads: np.ndarray

    def labels(self, gamma: float) -> np.ndarray:
        return self.alpha0 > gamma


def _group_sample(cache: KvCache, layer: int, g: int, q: np.ndarray, gamma: float):
    anchor = cache.anchor(layer, g)
    s, _ = head_scores(q, anchor)
    k, _ = cache.historical_view(layer, g, 0, cache.length(layer, g))
    label = oracle_labels(attention_weights(q, k), gamma, mode="group-mean")[0]
    return group_score(s), label.alpha0


def collect_from_cache(cache: KvCache, queries, excluded_layers=(), gamma: float = 0.65) -> ProxySamples:
    """``queries`` is [steps, layers, H_q, D] evaluated against a fixed cache."""
    cfg = cache.config
    r = cfg.group_size
    queries = np.asarray(queries, dtype=np.float32)
    if queries.ndim != 4 or queries.shape[1:] != (cfg.num_layers, cfg.num_q_heads, cfg.head_dim):
        raise ValueError(f"queries must be [steps, {cfg.num_layers}, {cfg.num_q_heads}, {cfg.head_dim}], "
                         f"got {queries.shape}")
    out = ([], [], [], [])
    for step in range(queries.shape[0]):
        for layer in range(cfg.num_layers):
            if layer in excluded_layers:
                continue
            for g in range(cfg.num_kv_heads):
                s, a0 = _group_sample(cache, layer, g, queries[step, layer, g * r:(g + 1) * r], gamma)
                for col, val in zip(out, (s, a0, layer, g)):
                    col.append(val)
    return ProxySamples(*(np.asarray(c) for c in out))


def collect_from_workload(wl: Workload, gamma: float = 0.65) -> ProxySamples:
    """Decode the workload step by step (appending each new token) and sample routable groups."""
    spec = wl.spec
    r = spec.num_q_heads // spec.num_kv_heads
    excluded = set(spec.excluded_layers)
    wl.reset()
    out = ([], [], [], [])
    for step in range(wl.queries.shape[0]):
        for layer in range(spec.num_layers):
            wl.append_step(step, layer)
            if layer in excluded:
                continue
            for g in range(spec.num_kv_heads):
                q = wl.queries[step, layer, g * r:(g + 1) * r]
                s, a0 = _group_sample(wl.cache, layer, g, q, gamma)
                for col, val in zip(out, (s, a0, layer, g)):
                    col.append(val)
    return ProxySamples(*(np.asarray(c) for c in out))


def evaluate(samples: ProxySamples, gamma: float, labels=None) -> tuple[PrCurve, list]:
    """PR curve plus the F1-vs-tau table (router semantics, includes the 0.55 operating point)."""
    y = samples.labels(gamma) if labels is None else np.asarray(labels, dtype=bool)
    curve = pr_curve(samples.scores, y)
    grid = sorted(set(F1_GRID) | {OPERATING_TAU})
    table = [operating_point(samples.scores, y, t) for t in grid]
    return curve, table
