"""Grouped-query KV cache with per-group initial-token anchors."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .counters import LoadCounters
from .tensor_store import read_tensor, write_tensor

# Keys shorter than this cannot serve as a cosine anchor.
MIN_ANCHOR_NORM = 1e-12


class CacheOverflowError(RuntimeError):
    pass


class DegenerateAnchorError(ValueError):
    pass


@dataclass(frozen=True)
class CacheConfig:
    num_layers: int
    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    max_len: int

    def __post_init__(self):
        for name in ("num_layers", "num_q_heads", "num_kv_heads", "head_dim", "max_len"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_q_heads % self.num_kv_heads:
            raise ValueError(
                f"num_q_heads={self.num_q_heads} not divisible by num_kv_heads={self.num_kv_heads}"
            )

    @property
    def group_size(self) -> int:
        """Query heads per KV head (r = H_q / H_kv)."""
        return self.num_q_heads // self.num_kv_heads


@dataclass(frozen=True)
class GroupAnchor:
    k0: np.ndarray
    k0_norm: float

    @classmethod
    def from_key(cls, k: np.ndarray) -> "GroupAnchor":
        k0 = np.array(k, dtype=np.float32, copy=True)
        k0.setflags(write=False)
        norm = float(np.linalg.norm(k0.astype(np.float64)))
        if not norm >= MIN_ANCHOR_NORM:
            raise DegenerateAnchorError(
                f"first-token key has norm {norm:.3e} < {MIN_ANCHOR_NORM}; cosine routing is undefined"
            )
        return cls(k0, norm)


class KvCache:
    """Contiguous K/V history per (layer, kv_head), preallocated to ``max_len``.

    Row 0 of each group is the anchor token. Reads go through :meth:`anchor`
    and :meth:`historical_view`, which charge the caller's ``LoadCounters``.
    """

    def __init__(self, config: CacheConfig):
        self.config = config
        shape = (config.num_layers, config.num_kv_heads, config.max_len, config.head_dim)
        self._k = np.zeros(shape, dtype=np.float32)
        self._v = np.zeros(shape, dtype=np.float32)
        self._len = np.zeros((config.num_layers, config.num_kv_heads), dtype=np.int64)
        self._anchors: dict[tuple[int, int], GroupAnchor] = {}
        # same anchors packed per layer so routing can score all groups at once
        self._anchor_k0 = np.zeros((config.num_layers, config.num_kv_heads, config.head_dim), dtype=np.float32)
        self._anchor_norm = np.full((config.num_layers, config.num_kv_heads), np.nan)

    def _check_group(self, layer: int, kv_head: int) -> None:
        if not (0 <= layer < self.config.num_layers and 0 <= kv_head < self.config.num_kv_heads):
            raise IndexError(f"no group (layer={layer}, kv_head={kv_head}) in {self.config}")

    def length(self, layer: int, kv_head: int) -> int:
        self._check_group(layer, kv_head)
        return int(self._len[layer, kv_head])

    def layer_lengths(self, layer: int) -> list[int]:
        if not 0 <= layer < self.config.num_layers:
            raise IndexError(f"layer {layer} out of range [0, {self.config.num_layers})")
        return self._len[layer].tolist()

    @property
    def seq_len(self) -> int:
        """Common length of all groups; raises if a full-model append is incomplete."""
        lo, hi = int(self._len.min()), int(self._len.max())
        if lo != hi:
            raise RuntimeError(f"cache lengths diverge across groups ({lo}..{hi})")
        return lo

    def append(self, layer: int, kv_head: int, k, v) -> None:
        self.extend(layer, kv_head, np.asarray(k)[None, :], np.asarray(v)[None, :])

    def extend(self, layer: int, kv_head: int, keys, values) -> None:
        """Append ``n`` rows at once (prefill)."""
        self._check_group(layer, kv_head)
        d = self.config.head_dim
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        if keys.ndim != 2 or keys.shape[1] != d or keys.shape != values.shape:
            raise ValueError(f"expected K/V of shape [n, {d}], got {keys.shape} and {values.shape}")
        n = keys.shape[0]
        cur = int(self._len[layer, kv_head])
        if cur + n > self.config.max_len:
            raise CacheOverflowError(
                f"group (layer={layer}, kv_head={kv_head}) holds {cur} of {self.config.max_len} tokens; "
                f"cannot append {n}"
            )
        if n == 0:
            return
        if cur == 0:
            a = GroupAnchor.from_key(keys[0])
            self._anchors[(layer, kv_head)] = a
            self._anchor_k0[layer, kv_head] = a.k0
            self._anchor_norm[layer, kv_head] = a.k0_norm
        self._k[layer, kv_head, cur:cur + n] = keys
        self._v[layer, kv_head, cur:cur + n] = values
        self._len[layer, kv_head] = cur + n

    def truncate(self, n: int) -> None:
        """Roll every group back to ``n`` tokens; the anchor survives while n >= 1."""
        if not 0 <= n <= int(self._len.min()):
            raise ValueError(f"cannot truncate to {n}; shortest group has {int(self._len.min())} tokens")
        self._len[:] = n
        if n == 0:
            self._anchors.clear()
            self._anchor_norm[:] = np.nan

    def anchor(self, layer: int, kv_head: int, counters: LoadCounters | None = None) -> GroupAnchor:
        self._check_group(layer, kv_head)
        try:
            a = self._anchors[(layer, kv_head)]
        except KeyError:
            raise LookupError(f"group (layer={layer}, kv_head={kv_head}) is empty; no anchor") from None
        if counters is not None:
            counters.anchor_floats_loaded += self.config.head_dim
        return a

    def layer_anchors(self, layer: int, counters: LoadCounters | None = None) -> tuple[np.ndarray, np.ndarray]:
        """All anchors of one layer: (k0 [H_kv, D] read-only, norms [H_kv])."""
        if not 0 <= layer < self.config.num_layers:
            raise IndexError(f"layer {layer} out of range [0, {self.config.num_layers})")
        norms = self._anchor_norm[layer]
        if np.isnan(norms).any():
            g = int(np.flatnonzero(np.isnan(norms))[0])
            raise LookupError(f"group (layer={layer}, kv_head={g}) is empty; no anchor")
        k0 = self._anchor_k0[layer]
        k0.flags.writeable = False
        if counters is not None:
            counters.anchor_floats_loaded += self.config.num_kv_heads * self.config.head_dim
        return k0, norms.copy()

    def historical_view(self, layer: int, kv_head: int, start: int, stop: int,
                        counters: LoadCounters | None = None) -> tuple[np.ndarray, np.ndarray]:
        n = self.length(layer, kv_head)
        if not 0 <= start <= stop <= n:
            raise IndexError(f"range [{start}, {stop}) outside [0, {n}) for (layer={layer}, kv_head={kv_head})")
        k = self._k[layer, kv_head, start:stop]
        v = self._v[layer, kv_head, start:stop]
        k.flags.writeable = False
        v.flags.writeable = False
        if counters is not None:
            counters.kv_floats_loaded += 2 * (stop - start) * self.config.head_dim
        return k, v


def save_snapshot(cache: KvCache, directory) -> Path:
    """Write one SNKT pair per group plus ``manifest.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cache.config
    lengths = [[cache.length(l, h) for h in range(cfg.num_kv_heads)] for l in range(cfg.num_layers)]
    for layer in range(cfg.num_layers):
        for head in range(cfg.num_kv_heads):
            n = lengths[layer][head]
            if n:
                k, v = cache.historical_view(layer, head, 0, n)
                write_tensor(out / f"k_l{layer}_h{head}.snkt", k)
                write_tensor(out / f"v_l{layer}_h{head}.snkt", v)
    manifest = {"version": 1, "config": asdict(cfg), "lengths": lengths}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_snapshot(directory) -> KvCache:
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("version") != 1:
        raise ValueError(f"{src / 'manifest.json'}: unsupported manifest version {manifest.get('version')!r}")
    cache = KvCache(CacheConfig(**manifest["config"]))
    for layer, row in enumerate(manifest["lengths"]):
        for head, n in enumerate(row):
            if n:
                k = read_tensor(src / f"k_l{layer}_h{head}.snkt")
                v = read_tensor(src / f"v_l{layer}_h{head}.snkt")
                if k.shape[0] != n or v.shape[0] != n:
                    raise ValueError(f"group (layer={layer}, kv_head={head}) has {k.shape[0]} rows, manifest says {n}")
                cache.extend(layer, head, k, v)
    return cache
