"""Synthetic decode workloads with planted sink structure.

Each (layer, kv_head) group gets a random unit anchor direction ``a``.
Queries are built with an exact, prescribed cosine to ``a``:

    q = sqrt(D) * (c * a + sqrt(1 - c^2) * n_perp)

where ``n_perp`` is a random unit vector orthogonal to ``a``. Historical
keys are standard normal, so with |q| = sqrt(D) their scaled logits are
~N(0, 1). A planted sink group scales its anchor so that the anchor logit
beats log-sum-exp of the rest by a wide margin (alpha_0 > 0.99); other groups
use an anchor of typical key norm, so a zero cosine leaves alpha_0 near 1/L.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kv_cache import CacheConfig, KvCache
from .tensor_store import Rng

# Anchor-logit margin over log-sum-exp of the other logits for planted groups.
SINK_MARGIN = 9.0
BOS_VALUE_SCALE = 1e-3
MIN_LENGTH = 32


@dataclass
class WorkloadSpec:
    num_layers: int = 4
    num_q_heads: int = 8
    num_kv_heads: int = 2
    head_dim: int = 64
    lengths: tuple[int, ...] = (8192,)
    steps: int = 32
    plant_sink_frac: float = 0.0
    alignment: float = 0.9
    seed: int = 0
    excluded_layers: tuple[int, ...] = (0, 1)
    # Cubic (a, b, c, d) in x = L / max(lengths): mean cosine of unplanted groups.
    score_shift: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    score_noise: float = 0.0

    def __post_init__(self):
        CacheConfig(self.num_layers, self.num_q_heads, self.num_kv_heads, self.head_dim, 1)
        self.lengths = tuple(int(n) for n in self.lengths)
        self.excluded_layers = tuple(int(i) for i in self.excluded_layers)
        if not self.lengths:
            raise ValueError("need at least one context length")
        if min(self.lengths) < MIN_LENGTH:
            raise ValueError(f"context lengths must be >= {MIN_LENGTH}, got {min(self.lengths)}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.plant_sink_frac <= 1.0:
            raise ValueError(f"plant_sink_frac must be in [0, 1], got {self.plant_sink_frac}")
        if not 0.0 < self.alignment < 1.0:
            raise ValueError(f"alignment must be in (0, 1), got {self.alignment}")
        if len(self.score_shift) != 4:
            raise ValueError("score_shift needs 4 cubic coefficients")
        if self.score_noise < 0:
            raise ValueError("score_noise must be >= 0")

    @property
    def routable_groups(self) -> list[tuple[int, int]]:
        excluded = set(self.excluded_layers)
        return [(l, g) for l in range(self.num_layers) if l not in excluded
                for g in range(self.num_kv_heads)]

    def planted_mask(self) -> np.ndarray:
        """[layers, kv_heads] bool; exactly floor(p * n) routable groups are planted."""
        groups = self.routable_groups
        n_plant = math.floor(self.plant_sink_frac * len(groups))
        mask = np.zeros((self.num_layers, self.num_kv_heads), dtype=bool)
        order = Rng(self.seed).permutation(len(groups))
        for i in order[:n_plant]:
            mask[groups[i]] = True
        return mask

    def mean_cosine(self, length: int) -> float:
        a, b, c, d = self.score_shift
        x = length / max(self.lengths)
        return ((a * x + b) * x + c) * x + d


@dataclass
class Workload:
    """Prefilled cache plus the inputs of ``steps`` decode steps."""

    spec: WorkloadSpec
    length: int
    cache: KvCache
    queries: np.ndarray      # [steps, layers, H_q, D]
    new_keys: np.ndarray     # [steps, layers, H_kv, D]
    new_values: np.ndarray   # [steps, layers, H_kv, D]
    planted: np.ndarray      # [layers, H_kv]
    directions: np.ndarray = field(repr=False, default=None)  # [layers, H_kv, D]

    def append_step(self, step: int, layer: int) -> None:
        for g in range(self.spec.num_kv_heads):
            self.cache.append(layer, g, self.new_keys[step, layer, g], self.new_values[step, layer, g])

    def reset(self) -> None:
        self.cache.truncate(self.length)


def _length_seed(seed: int, length: int) -> int:
    return int(np.random.SeedSequence([seed, length]).generate_state(1, dtype=np.uint64)[0])


def _unit(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


def generate_workload(spec: WorkloadSpec, length: int, extra_capacity: int | None = None) -> Workload:
    """Build the workload for one context length; deterministic in (spec, length)."""
    rng = Rng(_length_seed(spec.seed, length))
    nl, hq, hkv, d = spec.num_layers, spec.num_q_heads, spec.num_kv_heads, spec.head_dim
    r = hq // hkv
    steps = spec.steps
    capacity = length + (steps if extra_capacity is None else extra_capacity)
    cache = KvCache(CacheConfig(nl, hq, hkv, d, capacity))
    planted = spec.planted_mask()

    directions = _unit(rng.normal((nl, hkv, d)).astype(np.float64))
    total = length + steps
    sink_norm = (math.log(total) + 0.5 + SINK_MARGIN) / spec.alignment
    for layer in range(nl):
        for g in range(hkv):
            keys = rng.normal((length, d))
            values = rng.normal((length, d))
            norm = sink_norm if planted[layer, g] else math.sqrt(d)
            keys[0] = (norm * directions[layer, g]).astype(np.float32)
            values[0] *= BOS_VALUE_SCALE
            cache.extend(layer, g, keys, values)

    # per-head cosine targets
    cos = np.empty((steps, nl, hkv, r), dtype=np.float64)
    jitter = rng.uniform((steps, nl, hkv, r)).astype(np.float64)
    sink_cos = spec.alignment + 0.5 * (1.0 - spec.alignment) * jitter
    noise = (rng.normal((steps, nl, hkv, 1)).astype(np.float64)
             + 0.5 * rng.normal((steps, nl, hkv, r)).astype(np.float64))
    if spec.score_noise == 0.0:
        noise[:] = 0.0
    free_cos = np.clip(spec.mean_cosine(length) + spec.score_noise * noise, -0.95, 0.95)
    cos[:] = np.where(planted[None, :, :, None], sink_cos, free_cos)

    n = rng.normal((steps, nl, hkv, r, d)).astype(np.float64)
    a = directions[None, :, :, None, :]
    n -= np.sum(n * a, axis=-1, keepdims=True) * a
    n = _unit(n)
    c = cos[..., None]
    q = math.sqrt(d) * (c * a + np.sqrt(1.0 - c * c) * n)
    queries = q.reshape(steps, nl, hq, d).astype(np.float32)

    new_keys = rng.normal((steps, nl, hkv, d))
    new_values = rng.normal((steps, nl, hkv, d))
    return Workload(spec, length, cache, queries, new_keys, new_values, planted, directions)


def iter_workloads(spec: WorkloadSpec):
    """One workload per context length, built lazily to bound peak memory."""
    for length in spec.lengths:
        yield generate_workload(spec, length)
