"""Decode-step attention for one KV group.

Every kernel takes a query tile ``q`` of shape [G, D] (the G query heads that
share one KV head) and keys/values of shape [L, D]. The logit scale defaults
to 1/sqrt(D). All arithmetic is float32.
"""

from __future__ import annotations

import time
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .counters import LoadCounters

DEFAULT_BLOCK = 512

ChunkLoader = Callable[[int, int, LoadCounters], "tuple[np.ndarray, np.ndarray]"]


@dataclass
class SplitPartial:
    """Online-softmax state for one chunk: running max, normalizer, unnormalized output."""

    m: np.ndarray    # [G]
    l: np.ndarray    # [G]
    acc: np.ndarray  # [G, D]

    @property
    def empty(self) -> bool:
        return not np.any(self.l > 0)


def _scale(d: int, scale: float | None) -> np.float32:
    s = 1.0 / np.sqrt(d) if scale is None else scale
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    return np.float32(s)


def _check(q: np.ndarray, k: np.ndarray, v: np.ndarray | None = None) -> None:
    if q.ndim != 2 or k.ndim != 2:
        raise ValueError(f"expected q [G, D] and K [L, D], got {q.shape} and {k.shape}")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"head dim mismatch: q has D={q.shape[1]}, K has D={k.shape[1]}")
    if v is not None and v.shape != k.shape:
        raise ValueError(f"K {k.shape} and V {v.shape} differ")


def attention_weights(q, k, scale: float | None = None) -> np.ndarray:
    """Softmax rows [G, L] of the scaled logits."""
    q = np.asarray(q, dtype=np.float32)
    k = np.asarray(k, dtype=np.float32)
    _check(q, k)
    if k.shape[0] < 1:
        raise ValueError("need at least one key")
    logits = (q @ k.T) * _scale(q.shape[1], scale)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w


def dense_attention(q, k, v, scale: float | None = None) -> np.ndarray:
    """Two-pass exact-softmax reference."""
    v = np.asarray(v, dtype=np.float32)
    _check(np.asarray(q), np.asarray(k), v)
    return attention_weights(q, k, scale) @ v


def attend_partial(q, k, v, scale: float | None = None, block_size: int = DEFAULT_BLOCK) -> SplitPartial:
    """Single pass over K/V in contiguous blocks, carrying (m, l, acc)."""
    if block_size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    q = np.asarray(q, dtype=np.float32)
    _check(q, k, v)
    g, d = q.shape
    s = _scale(d, scale)
    m = np.full(g, -np.inf, dtype=np.float32)
    l = np.zeros(g, dtype=np.float32)
    acc = np.zeros((g, d), dtype=np.float32)
    for start in range(0, k.shape[0], block_size):
        kb = k[start:start + block_size]
        vb = v[start:start + block_size]
        logits = (q @ kb.T) * s
        m_new = np.maximum(m, logits.max(axis=1))
        rescale = np.exp(m - m_new)
        p = np.exp(logits - m_new[:, None])
        l = l * rescale + p.sum(axis=1)
        acc = acc * rescale[:, None] + p @ vb
        m = m_new
    return SplitPartial(m, l, acc)


def online_attention(q, k, v, block_size: int = DEFAULT_BLOCK, scale: float | None = None) -> np.ndarray:
    part = attend_partial(q, k, v, scale, block_size)
    if part.empty:
        raise ValueError("need at least one key")
    return part.acc / part.l[:, None]


def merge_partials(parts) -> np.ndarray:
    """Log-sum-exp combine; partials with l == 0 (empty chunks) are ignored."""
    live = [p for p in parts if not p.empty]
    if not live:
        raise ValueError("cannot merge: all partials are empty")
    m_star = np.max(np.stack([p.m for p in live]), axis=0)
    l_star = np.zeros_like(live[0].l)
    out = np.zeros_like(live[0].acc)
    for p in live:
        w = np.exp(p.m - m_star)
        l_star += p.l * w
        out += p.acc * w[:, None]
    return out / l_star[:, None]


def chunk_bounds(length: int, num_splits: int) -> list[tuple[int, int]]:
    """Balanced partition of [0, length): the first ``length % num_splits`` chunks get one extra token."""
    if not 1 <= num_splits <= max(length, 1):
        raise ValueError(f"num_splits must be in [1, {length}], got {num_splits}")
    base, extra = divmod(length, num_splits)
    bounds, start = [], 0
    for i in range(num_splits):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def splitk_from_loader(q, length: int, load: ChunkLoader, num_splits: int,
                       block_size: int = DEFAULT_BLOCK, scale: float | None = None,
                       executor: Executor | None = None) -> tuple[np.ndarray, LoadCounters]:
    """Split-K over chunks fetched by ``load(start, stop, counters)``.

    Each chunk owns its counters; they are merged after all workers finish.
    """
    q = np.asarray(q, dtype=np.float32)
    bounds = chunk_bounds(length, num_splits)

    def work(bound):
        c = LoadCounters()
        t0 = time.perf_counter()
        k, v = load(bound[0], bound[1], c)
        part = attend_partial(q, k, v, scale, block_size)
        c.wall_time["attention"] += time.perf_counter() - t0
        return part, c

    if executor is None or len(bounds) == 1:
        results = [work(b) for b in bounds]
    else:
        results = list(executor.map(work, bounds))
    counters = LoadCounters()
    for _, c in results:
        counters.merge(c)
    t0 = time.perf_counter()
    out = merge_partials([p for p, _ in results])
    counters.wall_time["merge"] += time.perf_counter() - t0
    return out, counters


def splitk_attention(q, k, v, num_splits: int, block_size: int = DEFAULT_BLOCK,
                     scale: float | None = None, executor: Executor | None = None
                     ) -> tuple[np.ndarray, LoadCounters]:
    k = np.asarray(k, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    _check(np.asarray(q), k, v)
    d = k.shape[1]

    def load(start, stop, counters):
        counters.kv_floats_loaded += 2 * (stop - start) * d
        return k[start:stop], v[start:stop]

    out, counters = splitk_from_loader(q, k.shape[0], load, num_splits, block_size, scale, executor)
    counters.groups_active += 1
    return out, counters
