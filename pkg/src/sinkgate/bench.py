"""Dense vs. routed decode benchmark over synthetic workloads."""

from __future__ import annotations

import csv
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .attention import DEFAULT_BLOCK
from .counters import LoadCounters
from .profile import ThresholdProfile
from .router import RoutingConfig, Verdict, dense_decode_step, routed_decode_step
from .workload import Workload, WorkloadSpec, generate_workload

GATE_TOL = 1e-5
DEFAULT_WARMUP = 4
MIN_MEASURED_STEPS = 32

CSV_COLUMNS = (
    "length", "steps", "dense_ms", "routed_ms", "speedup",
    "dense_attention_ms", "dense_merge_ms",
    "routed_routing_ms", "routed_attention_ms", "routed_merge_ms",
    "skip_ratio", "kv_floats_dense", "kv_floats_routed", "kv_floats_avoided",
    "anchor_floats_loaded", "max_active_abs_diff",
)

_NUM = {"type": "number"}
_INT = {"type": "integer", "minimum": 0}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "workload", "settings", "rows"],
    "properties": {
        "version": {"const": 1},
        "workload": {"type": "object"},
        "settings": {
            "type": "object",
            "required": ["num_splits", "workers", "warmup", "block_size"],
        },
        "profile": {"type": ["object", "null"]},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": list(CSV_COLUMNS),
                "additionalProperties": False,
                "properties": {
                    "length": {"type": "integer", "minimum": 1},
                    "steps": {"type": "integer", "minimum": 1},
                    "dense_ms": {"type": "number", "exclusiveMinimum": 0},
                    "routed_ms": {"type": "number", "exclusiveMinimum": 0},
                    "speedup": {"type": "number", "exclusiveMinimum": 0},
                    "dense_attention_ms": _NUM,
                    "dense_merge_ms": _NUM,
                    "routed_routing_ms": _NUM,
                    "routed_attention_ms": _NUM,
                    "routed_merge_ms": _NUM,
                    "skip_ratio": {"type": "number", "minimum": 0, "maximum": 1},
                    "kv_floats_dense": _INT,
                    "kv_floats_routed": _INT,
                    "kv_floats_avoided": _INT,
                    "anchor_floats_loaded": _INT,
                    "max_active_abs_diff": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}


class CorrectnessGateError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class StepReport:
    """One benchmark row; latencies are medians of per-token sums over layers (ms)."""

    length: int
    steps: int
    dense_ms: float
    routed_ms: float
    speedup: float
    dense_attention_ms: float
    dense_merge_ms: float
    routed_routing_ms: float
    routed_attention_ms: float
    routed_merge_ms: float
    skip_ratio: float
    kv_floats_dense: int
    kv_floats_routed: int
    kv_floats_avoided: int
    anchor_floats_loaded: int
    max_active_abs_diff: float


def bench_workload(wl: Workload, config: RoutingConfig, *, warmup: int = DEFAULT_WARMUP,
                   num_splits: int = 4, block_size: int = DEFAULT_BLOCK, executor=None) -> StepReport:
    """Interleave dense and routed layers on the same cache state, step by step."""
    spec = wl.spec
    r = spec.num_q_heads // spec.num_kv_heads
    total_steps = wl.queries.shape[0]
    if total_steps <= warmup:
        raise ValueError(f"workload has {total_steps} steps, need more than warmup={warmup}")
    wl.reset()
    dense_t, routed_t = [], []
    phases = {k: [] for k in ("d_att", "d_merge", "r_route", "r_att", "r_merge")}
    kv_dense = kv_routed = anchor = 0
    sinks = routable = 0
    max_diff = 0.0

    for step in range(total_steps):
        measured = step >= warmup
        td = tr = 0.0
        dc, rc = LoadCounters(), LoadCounters()
        for layer in range(spec.num_layers):
            wl.append_step(step, layer)
            q = wl.queries[step, layer]
            t0 = time.perf_counter()
            dense_out, c_d = dense_decode_step(layer, q, wl.cache, num_splits=num_splits,
                                               block_size=block_size, executor=executor)
            t1 = time.perf_counter()
            routed_out, decisions, c_r = routed_decode_step(layer, q, wl.cache, config, num_splits=num_splits,
                                                            block_size=block_size, executor=executor)
            t2 = time.perf_counter()
            td += t1 - t0
            tr += t2 - t1
            dc.merge(c_d)
            rc.merge(c_r)
            for d in decisions:
                rows = slice(d.kv_head * r, (d.kv_head + 1) * r)
                if d.verdict is Verdict.ACTIVE:
                    diff = float(np.max(np.abs(routed_out[rows] - dense_out[rows])))
                    max_diff = max(max_diff, diff)
                    if not diff <= GATE_TOL:
                        raise CorrectnessGateError(
                            f"active group output diverged from dense by {diff:.3e} > {GATE_TOL}",
                            {"length": wl.length, "step": step, "layer": layer, "kv_head": d.kv_head,
                             "max_abs_diff": diff, "group_score": d.group_score, "threshold": d.threshold,
                             "dense": dense_out[rows].tolist(), "routed": routed_out[rows].tolist()},
                        )
                if measured and not d.excluded:
                    routable += 1
                    sinks += d.verdict is Verdict.SINK
        if measured:
            dense_t.append(td)
            routed_t.append(tr)
            kv_dense += dc.kv_floats_loaded
            kv_routed += rc.kv_floats_loaded
            anchor += rc.anchor_floats_loaded
            phases["d_att"].append(dc.wall_time["attention"])
            phases["d_merge"].append(dc.wall_time["merge"])
            phases["r_route"].append(rc.wall_time["routing"])
            phases["r_att"].append(rc.wall_time["attention"])
            phases["r_merge"].append(rc.wall_time["merge"])

    ms = {k: 1e3 * statistics.median(v) for k, v in phases.items()}
    dense_ms = 1e3 * statistics.median(dense_t)
    routed_ms = 1e3 * statistics.median(routed_t)
    return StepReport(
        length=wl.length, steps=total_steps - warmup, dense_ms=dense_ms, routed_ms=routed_ms,
        speedup=dense_ms / routed_ms,
        dense_attention_ms=ms["d_att"], dense_merge_ms=ms["d_merge"],
        routed_routing_ms=ms["r_route"], routed_attention_ms=ms["r_att"], routed_merge_ms=ms["r_merge"],
        skip_ratio=sinks / routable if routable else 0.0,
        kv_floats_dense=kv_dense, kv_floats_routed=kv_routed, kv_floats_avoided=kv_dense - kv_routed,
        anchor_floats_loaded=anchor, max_active_abs_diff=max_diff,
    )


def run_benchmark(spec: WorkloadSpec, profile: ThresholdProfile, *, warmup: int = DEFAULT_WARMUP,
                  num_splits: int = 4, workers: int = 1, block_size: int = DEFAULT_BLOCK) -> list[StepReport]:
    """Benchmark each context length in turn; the workload carries warmup + measured steps."""
    config = RoutingConfig.from_profile(profile)
    run_spec = replace(spec, steps=spec.steps + warmup)
    rows = []
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for length in spec.lengths:
            wl = generate_workload(run_spec, length)
            rows.append(bench_workload(wl, config, warmup=warmup, num_splits=num_splits,
                                       block_size=block_size, executor=executor))
            del wl
    finally:
        if executor is not None:
            executor.shutdown()
    return rows


def report_dict(rows, spec: WorkloadSpec, settings: dict, profile: ThresholdProfile | None = None) -> dict:
    return {
        "version": 1,
        "workload": asdict(spec),
        "settings": settings,
        "profile": profile.to_dict() if profile is not None else None,
        "rows": [asdict(r) for r in rows],
    }


def write_csv(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow(asdict(r))
