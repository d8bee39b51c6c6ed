"""Command line entry point: ``run``, ``analyze`` and ``compare``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .client import ConfigError, parse_config
from .client.config import DS_KINDS, FIG4_EXAMPLE, PARADIGMS
from .harness import (
    DEFAULT_METRICS,
    HarnessError,
    Scenario,
    analyze,
    compare,
    derive_seed,
    run,
)
from .metrics import BadLine, IoError
from .metrics.analysis import BUCKETS, METRICS, UnknownMetric


def _sizes(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlstestbed", description="Simulated group messaging testbed.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="simulate a scenario and write a run directory")
    r.add_argument("--config", type=Path, help="client config TOML (default: built-in example)")
    r.add_argument("--replicas", type=int)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--ds", choices=DS_KINDS)
    r.add_argument("--policy", choices=("first", "last", "random"), type=str.lower)
    r.add_argument("--paradigm", choices=PARADIGMS)
    r.add_argument("--proposals-per-commit", type=int)
    end = r.add_mutually_exclusive_group(required=True)
    end.add_argument("--target-size", type=int)
    end.add_argument("--duration-ms", type=float)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--runs", type=int, default=1, help="independent repetitions with derived seeds")
    r.add_argument("--latency", default="constant:5", help="link model, e.g. constant:5 or uniform:2,8")
    r.add_argument("--cost-clock", choices=("cpu", "model"), default="cpu")
    r.add_argument("--stage-samples", type=int, default=4)
    r.add_argument("--heartbeat-ms", type=float, default=1000.0)

    a = sub.add_parser("analyze", help="series, fits and plots from run directories")
    a.add_argument("runs", nargs="+", type=Path)
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--metrics", default=",".join(DEFAULT_METRICS))
    a.add_argument("--bucket", choices=tuple(BUCKETS), default="size")
    a.add_argument("--sizes", type=_sizes)
    a.add_argument("--no-plots", action="store_true")

    c = sub.add_parser("compare", help="one labeled series per run set")
    c.add_argument("runs", nargs="+", type=Path)
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--metric", default="latency_mean", choices=sorted(METRICS))
    c.add_argument("--bucket", choices=tuple(BUCKETS), default="size")
    c.add_argument("--no-plots", action="store_true")
    return p


def _scenario(args) -> Scenario:
    cfg = parse_config(args.config.read_text(encoding="utf-8")) if args.config else parse_config(FIG4_EXAMPLE)
    base = Scenario(config=cfg, duration_ms=1.0)
    sc = base.with_overrides(replicas=args.replicas, ds=args.ds, policy=args.policy, paradigm=args.paradigm,
                             proposals_per_commit=args.proposals_per_commit)
    return Scenario(config=sc.config, seed=args.seed, target_size=args.target_size, duration_ms=args.duration_ms,
                    latency=args.latency, cost_clock=args.cost_clock, stage_samples=args.stage_samples,
                    heartbeat_ms=args.heartbeat_ms)


def _cmd_run(args) -> int:
    if args.runs < 1:
        raise ConfigError("--runs must be >= 1")
    sc = _scenario(args)
    for i in range(args.runs):
        seed = sc.seed if args.runs == 1 else derive_seed(sc.seed, "run", i)
        out = args.out if args.runs == 1 else args.out / f"run{i}"
        res = run(replace(sc, seed=seed, out=out))
        sizes = ", ".join(f"{g}={n}" for g, n in sorted(res.group_sizes().items()))
        print(f"{out}: {len(res.records)} records, {res.end_ns / 1e9:.1f} s virtual, sizes {sizes}")
    return 0


def _cmd_analyze(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = analyze(args.runs, args.out, metrics, args.bucket, args.sizes, plots=not args.no_plots)
    for metric, label, model, slope, intercept, r2 in report.fits:
        print(f"{metric} [{label}] {model}: slope={slope:.4g} intercept={intercept:.4g} r2={r2:.4f}")
    print(f"wrote {len(report.files)} files to {args.out}")
    return 0


def _cmd_compare(args) -> int:
    path = compare(args.runs, args.out, args.metric, args.bucket, plots=not args.no_plots)
    print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "analyze": _cmd_analyze, "compare": _cmd_compare}[args.verb]
    try:
        return handler(args)
    except (ConfigError, HarnessError, UnknownMetric, BadLine, IoError, OSError) as exc:
        print(f"mlstestbed {args.verb}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
