"""``sinkgate`` command line: calibrate, bench, route-eval, analyze, selftest.

Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import analysis, bench, calibration, route_eval, selftest
from .kv_cache import load_snapshot
from .profile import DEFAULT_GAMMA, ThresholdProfile, load_profile, save_profile
from .tensor_store import read_tensor
from .workload import WorkloadSpec, generate_workload

log = logging.getLogger("sinkgate")


class CliError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(n: int):
    def parse(text: str) -> tuple[float, ...]:
        try:
            vals = tuple(float(t) for t in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        return vals
    return parse


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", type=Path, help="threshold profile JSON")
    p.add_argument("--workers", type=int, default=1, help="split-K worker threads")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--format", choices=("json", "csv"), help="output format (default: both)")
    p.add_argument("-v", "--verbose", action="store_true")


def _workload_flags(p: argparse.ArgumentParser, lengths_required: bool = False, steps: int = 32) -> None:
    g = p.add_argument_group("workload")
    g.add_argument("--layers", type=int, default=4)
    g.add_argument("--hq", type=int, default=8, help="query heads")
    g.add_argument("--hkv", type=int, default=2, help="KV heads")
    g.add_argument("--dim", type=int, default=64, help="head dimension")
    g.add_argument("--lengths", type=_int_list, required=lengths_required,
                   default=None if lengths_required else (8192,), help="e.g. 8192,16384")
    g.add_argument("--steps", type=int, default=steps, help="decode steps per length")
    g.add_argument("--plant-sink-frac", type=float, default=0.0)
    g.add_argument("--alignment", type=float, default=0.9, help="minimum planted query-anchor cosine")
    g.add_argument("--exclude-layers", type=_int_list, default=None,
                   help="layers never routed (default: from profile, else 0,1)")
    g.add_argument("--score-shift", type=_float_list(4), default=(0.0, 0.0, 0.0, 0.0),
                   help="cubic a,b,c,d giving the mean cosine of unplanted groups over L/max(L)")
    g.add_argument("--score-noise", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sinkgate", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit a length-adaptive threshold profile")
    _common(p, out_required=True)
    _workload_flags(p, lengths_required=True, steps=50)
    p.set_defaults(layers=8, hq=32, hkv=8, score_shift=(0.0, -0.7, 0.8, 0.3), score_noise=0.15)
    p.add_argument("--target-skip", type=float, default=0.60)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--samples", type=int, help="decode steps per length (default: --steps)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("bench", help="dense vs routed decode latency and KV traffic")
    _common(p)
    _workload_flags(p)
    p.add_argument("--tau", type=float, help="constant threshold instead of --profile")
    p.add_argument("--warmup", type=int, default=bench.DEFAULT_WARMUP)
    p.add_argument("--splits", type=int, default=4, help="split-K chunks per group")
    p.add_argument("--block-size", type=int, default=512)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("route-eval", help="PR/AUPRC of the cosine proxy against oracle labels")
    _common(p)
    _workload_flags(p, steps=8)
    p.add_argument("--gamma", type=float, help="oracle threshold (default: profile gamma, else 0.65)")
    p.add_argument("--replay", type=Path, help="cache snapshot dir with queries.snkt [steps, layers, H_q, D]")
    p.add_argument("--shuffle-labels", action="store_true", help="permute oracle labels (chance baseline)")
    p.set_defaults(func=cmd_route_eval)

    p = sub.add_parser("analyze", help="statistics over SNKT tensor dumps")
    _common(p)
    p.add_argument("--dumps", type=Path, required=True, help="directory of SNKT dumps")
    p.add_argument("--bos-index", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--aggregate", choices=("mean-of-ratios", "ratio-of-means"), default="mean-of-ratios")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("selftest", help="run the invariant suite")
    _common(p)
    p.add_argument("--inject-fault", choices=("tie-breaking",), help="deliberately break a routing rule")
    p.set_defaults(func=cmd_selftest)
    return parser


def _spec(args, excluded) -> WorkloadSpec:
    try:
        return WorkloadSpec(
            num_layers=args.layers, num_q_heads=args.hq, num_kv_heads=args.hkv, head_dim=args.dim,
            lengths=args.lengths, steps=args.steps, plant_sink_frac=args.plant_sink_frac,
            alignment=args.alignment, seed=args.seed, excluded_layers=tuple(excluded),
            score_shift=tuple(args.score_shift), score_noise=args.score_noise,
        )
    except ValueError as exc:
        raise CliError(f"invalid workload: {exc}") from None


def _excluded(args, profile: ThresholdProfile | None):
    if args.exclude_layers is not None:
        return args.exclude_layers
    return profile.excluded_layers if profile is not None else (0, 1)


def _formats(args) -> tuple[str, ...]:
    return (args.format,) if args.format else ("json", "csv")


def _write_table(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _print_table(rows: list[dict], columns) -> None:
    print("  ".join(f"{c:>12}" for c in columns))
    for r in rows:
        cells = []
        for c in columns:
            v = r[c]
            cells.append(f"{v:>12.4f}" if isinstance(v, float) else f"{v!s:>12}")
        print("  ".join(cells))


def _load_profile(args) -> ThresholdProfile | None:
    if args.profile is None:
        return None
    try:
        return load_profile(args.profile)
    except FileNotFoundError:
        raise CliError(f"profile not found: {args.profile}") from None


def cmd_calibrate(args) -> int:
    excluded = args.exclude_layers if args.exclude_layers is not None else (0, 1)
    spec = _spec(args, excluded)
    try:
        result = calibration.calibrate(spec, spec.lengths, target_skip=args.target_skip, gamma=args.gamma,
                                       samples=args.samples or args.steps)
    except calibration.RankDeficientError as exc:
        raise CliError(f"rank error: {exc}") from None
    args.out.mkdir(parents=True, exist_ok=True)
    save_profile(args.out / "profile.json", result.profile)
    if "csv" in _formats(args):
        _write_table(args.out / "calibration.csv", result.rows)
    if "json" in _formats(args):
        (args.out / "calibration.json").write_text(json.dumps(
            {"coefficients": list(result.fit.coefficients), "residual": result.fit.residual,
             "rows": result.rows}, indent=2))
    _print_table(result.rows, ("length", "tau_solved", "skip_solved", "tau_fit", "skip_realized"))
    a, b, c, d = result.profile.coefficients
    print(f"tau(x) = {a:.6g} x^3 + {b:.6g} x^2 + {c:.6g} x + {d:.6g}, x = L / {result.profile.length_normalizer:g}")
    print(f"wrote {args.out / 'profile.json'}")
    return 0


def cmd_bench(args) -> int:
    if (args.profile is None) == (args.tau is None):
        raise CliError("bench needs exactly one of --profile or --tau")
    profile = _load_profile(args)
    if profile is None:
        profile = ThresholdProfile.constant(args.tau)
    if args.exclude_layers is not None:
        profile = replace(profile, excluded_layers=args.exclude_layers)
    spec = _spec(args, profile.excluded_layers)
    if spec.steps < bench.MIN_MEASURED_STEPS:
        log.warning("measuring %d steps; latency medians are specified over >= %d", spec.steps,
                    bench.MIN_MEASURED_STEPS)
    try:
        rows = bench.run_benchmark(spec, profile, warmup=args.warmup, num_splits=args.splits,
                                   workers=args.workers, block_size=args.block_size)
    except bench.CorrectnessGateError as exc:
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / "gate_failure.json").write_text(json.dumps(exc.diagnostics, indent=2))
        raise CliError(f"correctness gate failed: {exc}") from None
    settings = {"num_splits": args.splits, "workers": args.workers, "warmup": args.warmup,
                "block_size": args.block_size}
    report = bench.report_dict(rows, spec, settings, profile)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        if "json" in _formats(args):
            (args.out / "bench.json").write_text(json.dumps(report, indent=2))
        if "csv" in _formats(args):
            bench.write_csv(args.out / "bench.csv", rows)
    _print_table([asdict(r) for r in rows],
                 ("length", "dense_ms", "routed_ms", "speedup", "skip_ratio", "kv_floats_avoided"))
    return 0


def cmd_route_eval(args) -> int:
    profile = _load_profile(args)
    gamma = args.gamma if args.gamma is not None else (profile.gamma if profile else DEFAULT_GAMMA)
    excluded = _excluded(args, profile)
    if args.replay:
        cache = load_snapshot(args.replay)
        queries = read_tensor(args.replay / "queries.snkt")
        samples = route_eval.collect_from_cache(cache, queries, set(excluded), gamma)
    else:
        spec = _spec(args, excluded)
        parts = [route_eval.collect_from_workload(generate_workload(spec, n), gamma) for n in spec.lengths]
        samples = route_eval.ProxySamples(*(np.concatenate([getattr(p, f) for p in parts])
                                            for f in ("scores", "alpha0", "layers", "kv_heads")))
    labels = samples.labels(gamma)
    if not labels.any():
        raise CliError(f"no positive oracle labels (alpha0 > {gamma}) among {labels.size} groups")
    if args.shuffle_labels:
        labels = labels[np.random.Generator(np.random.PCG64(args.seed)).permutation(labels.size)]
    curve, table = route_eval.evaluate(samples, gamma, labels)
    op = next(p for p in table if p.threshold == route_eval.OPERATING_TAU)
    summary = {"gamma": gamma, "samples": curve.total, "positives": curve.positives,
               "prevalence": curve.prevalence, "auprc": curve.auprc,
               "operating_point": asdict(op), "shuffled": bool(args.shuffle_labels)}
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        pr_rows = [asdict(p) for p in curve.points]
        f1_rows = [asdict(p) for p in table]
        if "json" in _formats(args):
            (args.out / "route_eval.json").write_text(json.dumps(
                {**summary, "pr_curve": pr_rows, "f1_table": f1_rows}, indent=2))
        if "csv" in _formats(args):
            _write_table(args.out / "pr_curve.csv", pr_rows)
            _write_table(args.out / "f1_table.csv", f1_rows)
    print(f"groups={curve.total} positives={curve.positives} prevalence={curve.prevalence:.4f} "
          f"AUPRC={curve.auprc:.4f}")
    _print_table([asdict(p) for p in table], ("threshold", "precision", "recall", "f1"))
    return 0


def _read_optional(directory: Path, name: str):
    path = directory / name
    return read_tensor(path) if path.exists() else None


def _samples(t: np.ndarray) -> np.ndarray:
    return t[None] if t.ndim == 2 else t


def analyze_dumps(directory: Path, bos_index: int = 0, epsilon: float = 1e-8,
                  aggregate: str = "mean-of-ratios") -> dict[str, list[dict]]:
    """Statistic tables from whichever SNKT dumps exist in ``directory``.

    weights.snkt [N, L]; keys.snkt / values.snkt [S, N, D] or [N, D] (token
    ``bos_index`` of each sample is BOS); residual_c/in/delta.snkt [M, D_model].
    """
    if not directory.is_dir():
        raise CliError(f"dump directory not found: {directory}")
    tables: dict[str, list[dict]] = {}
    weights = _read_optional(directory, "weights.snkt")
    if weights is not None:
        rows = weights.reshape(-1, weights.shape[-1])
        tables["concentration"] = [{"row": i, **asdict(analysis.concentration_stats(r, bos_index))}
                                   for i, r in enumerate(rows)]
        agg = analysis.aggregate_concentration(rows, bos_index, aggregate)
        tables["concentration_summary"] = [{"aggregate": aggregate, "rows": len(rows), **asdict(agg)}]
    for name in ("values", "keys"):
        t = _read_optional(directory, f"{name}.snkt")
        if t is None:
            continue
        t = _samples(t)
        tables[f"{name[:-1]}_norms"] = [
            dict(zip(("sample", "bos_norm", "mean_nonbos_norm"), (i, *analysis.norm_stats(s, bos_index))))
            for i, s in enumerate(t)
        ]
        if name == "keys":
            flat = t.reshape(-1, t.shape[-1])
            n = t.shape[1]
            bos_rows = [s * n + bos_index for s in range(t.shape[0])]
            if len(bos_rows) >= 2:
                tables["key_geometry"] = [asdict(analysis.key_geometry_stats(flat, bos_rows))]
    parts = [_read_optional(directory, f"residual_{n}.snkt") for n in ("c", "in", "delta")]
    if any(p is not None for p in parts):
        if any(p is None for p in parts):
            raise CliError("residual dumps need all of residual_c, residual_in, residual_delta")
        c, r_in, delta = (p.reshape(-1, p.shape[-1]) for p in parts)
        tables["residual"] = [{"row": i, **asdict(analysis.residual_metrics(c[i], r_in[i], delta[i], epsilon))}
                              for i in range(c.shape[0])]
    if not tables:
        raise CliError(f"no recognised SNKT dumps in {directory}")
    return tables


def cmd_analyze(args) -> int:
    tables = analyze_dumps(args.dumps, args.bos_index, args.epsilon, args.aggregate)
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        if "json" in _formats(args):
            (args.out / "analysis.json").write_text(json.dumps({"tables": tables}, indent=2))
        if "csv" in _formats(args):
            for name, rows in tables.items():
                _write_table(args.out / f"{name}.csv", rows)
    else:
        print(json.dumps({"tables": tables}, indent=2))
    if args.out:
        for name, rows in tables.items():
            print(f"{name}: {len(rows)} rows")
    return 0


def cmd_selftest(args) -> int:
    results = selftest.run_selftest(args.seed, args.inject_fault)
    failed = [name for name, (ok, _) in results.items() if not ok]
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "selftest.json").write_text(selftest.summary_json(results))
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, LookupError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
