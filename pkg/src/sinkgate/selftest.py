"""Fast invariant suite behind ``sinkgate selftest``."""

from __future__ import annotations

import contextlib
import json
import tempfile
import time
from pathlib import Path

import numpy as np

from . import analysis, attention, calibration, reference
from .kv_cache import CacheConfig, KvCache
from .profile import ThresholdProfile, load_profile, save_profile
from .router import RoutingConfig, Verdict, inject_fault, route, routed_decode_step
from .tensor_store import Rng

TOL = 1e-5


class CheckFailed(AssertionError):
    pass


def _expect(cond: bool, message: str) -> None:
    if not cond:
        raise CheckFailed(message)


def check_oracle_equivalence(rng: Rng) -> str:
    worst = 0.0
    for length in (1, 7, 64, 1024):
        for d in (32, 64):
            for g in (1, 4):
                q, k, v = rng.normal((g, d)), rng.normal((length, d)), rng.normal((length, d))
                dense = attention.dense_attention(q, k, v)
                ref = reference.textbook_attention(q, k, v) if length <= 64 else dense
                _expect(np.max(np.abs(dense - ref)) <= 1e-6, f"dense vs textbook at L={length}")
                for splits in (1, 2, 4):
                    if splits > length:
                        continue
                    out, _ = attention.splitk_attention(q, k, v, splits, block_size=64)
                    worst = max(worst, float(np.max(np.abs(out - dense))))
                worst = max(worst, float(np.max(np.abs(attention.online_attention(q, k, v, 16) - dense))))
    _expect(worst <= TOL, f"max |kernel - dense| = {worst:.2e}")
    return f"max diff {worst:.2e}"


def check_split_invariance(rng: Rng) -> str:
    q, k, v = rng.normal((4, 64)), rng.normal((1024, 64)), rng.normal((1024, 64))
    outs = [attention.splitk_attention(q, k, v, s)[0] for s in (1, 2, 4, 8)]
    worst = max(float(np.max(np.abs(a - b))) for a in outs for b in outs)
    _expect(worst <= TOL, f"split outputs differ by {worst:.2e}")
    _, c = attention.splitk_attention(q, k, v, 3)
    _expect(c.kv_floats_loaded == 2 * 1024 * 64, "split-K loaded the wrong number of floats")
    return f"max pairwise diff {worst:.2e}"


def check_update_bound(rng: Rng) -> str:
    for i in range(200):
        length = int(rng.integers(2, 200))
        delta = (0.05, 0.2, 0.4)[i % 3]
        eps_v = (0.0, 0.01)[i % 2]
        rest = rng.uniform(length - 1).astype(np.float64)
        rest = rest / rest.sum() * delta * float(rng.uniform(1)[0])
        row = np.r_[1.0 - rest.sum(), rest]
        v = rng.normal((length, 8)).astype(np.float64)
        v0 = rng.normal(8).astype(np.float64)
        v[0] = v0 / np.linalg.norm(v0) * eps_v * float(rng.uniform(1)[0])
        rep = analysis.check_update_bound(row, v, eps_v)
        _expect(rep.holds and rep.precondition_ok, f"bound violated on instance {i}: {rep}")
    return "200 instances"


def check_routing_semantics(rng: Rng) -> str:
    tie = route(5, 0.55, 100, RoutingConfig(ThresholdProfile.constant(0.55)))
    _expect(tie.verdict is Verdict.ACTIVE, "tie S == tau must route Active")
    above = route(5, 0.56, 100, RoutingConfig(ThresholdProfile.constant(0.55)))
    _expect(above.verdict is Verdict.SINK, "S > tau must route Sink")
    excl = route(0, 0.99, 100, RoutingConfig(ThresholdProfile.constant(0.55)))
    _expect(excl.verdict is Verdict.ACTIVE, "excluded layer routed Sink")

    cfg = CacheConfig(num_layers=3, num_q_heads=8, num_kv_heads=4, head_dim=16, max_len=64)
    for trial in range(50):
        cache = KvCache(cfg)
        length = int(rng.integers(1, 64))
        for layer in range(cfg.num_layers):
            for g in range(cfg.num_kv_heads):
                cache.extend(layer, g, rng.normal((length, 16)), rng.normal((length, 16)))
        tau = float(rng.uniform(1)[0]) * 2 - 1
        config = RoutingConfig(ThresholdProfile.constant(tau), excluded_layers={0})
        for layer in range(cfg.num_layers):
            q = rng.normal((8, 16))
            out, decisions, counters = routed_decode_step(layer, q, cache, config, num_splits=2)
            for d in decisions:
                rows = slice(d.kv_head * 2, d.kv_head * 2 + 2)
                k, v = cache.historical_view(layer, d.kv_head, 0, length)
                if d.verdict is Verdict.SINK:
                    _expect(layer != 0, "excluded layer skipped")
                    _expect(not np.any(out[rows]), "sink rows not exactly zero")
                else:
                    dense = attention.dense_attention(q[rows], k, v)
                    _expect(np.max(np.abs(out[rows] - dense)) <= TOL, "active rows differ from dense")
            active = sum(d.verdict is Verdict.ACTIVE for d in decisions)
            _expect(counters.kv_floats_loaded == active * 2 * length * 16, "sink group loaded KV")
    return "50 caches x 3 layers"


def check_calibration_round_trip(rng: Rng) -> str:
    truth = (1.0, -2.0, 0.5, 0.3)
    xs = [0.25, 0.5, 0.75, 1.0]
    fit = calibration.fit_cubic([(x, np.polyval(truth, x)) for x in xs])
    _expect(np.allclose(fit.coefficients, truth, atol=1e-6), f"cubic recovery gave {fit.coefficients}")
    pop = calibration.ScorePopulation(np.clip(rng.normal(500) * 0.3, -1, 1))
    tau = calibration.solve_threshold(pop, 0.6)
    _expect(tau == reference.brute_force_threshold(pop.scores, 0.6), "solve disagrees with brute-force scan")
    _expect(abs(calibration.skip_at(pop, tau) - 0.6) <= 1 / len(pop), "realized skip off target")
    profile = ThresholdProfile(fit.coefficients, 8192.0, target_skip=0.6)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "profile.json"
        save_profile(path, profile)
        _expect(load_profile(path) == profile, "profile JSON round-trip changed fields")
    return "fit, solve, persist"


def check_proxy_evaluation(rng: Rng) -> str:
    scores = rng.uniform(200)
    labels = rng.uniform(200) < 0.3
    labels[0] = True
    curve = analysis.pr_curve(scores, labels)
    _, ap = reference.brute_force_pr(scores, labels)
    _expect(abs(curve.auprc - ap) <= 1e-9, f"AUPRC {curve.auprc} vs brute force {ap}")
    return f"auprc {curve.auprc:.4f}"


CHECKS = {
    "oracle-equivalence": check_oracle_equivalence,
    "split-invariance": check_split_invariance,
    "update-bound": check_update_bound,
    "routing-semantics": check_routing_semantics,
    "calibration-round-trip": check_calibration_round_trip,
    "proxy-evaluation": check_proxy_evaluation,
}


def run_selftest(seed: int = 0, fault: str | None = None, echo=print) -> dict[str, tuple[bool, str]]:
    results = {}
    ctx = inject_fault(fault) if fault else contextlib.nullcontext()
    with ctx:
        for name, check in CHECKS.items():
            t0 = time.perf_counter()
            try:
                detail = check(Rng(seed))
                ok = True
            except CheckFailed as exc:
                ok, detail = False, str(exc)
            results[name] = (ok, detail)
            echo(f"{'PASS' if ok else 'FAIL'}  {name:<24} {detail}  ({time.perf_counter() - t0:.2f}s)")
    return results


def summary_json(results) -> str:
    return json.dumps({name: {"ok": ok, "detail": d} for name, (ok, d) in results.items()}, indent=2)
