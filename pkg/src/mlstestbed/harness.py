"""Scenario runner and offline analysis."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .client import Client, ClientConfig, ConfigError, Ramp, format_config, load_config
from .client.config import PARADIGMS, POLICIES
from .crypto import CryptoProvider
from .delivery import GossipParams, make_delivery
from .metrics import (
    LogRecord,
    LogSink,
    aggregate_runs,
    compute_latency,
    export_csv,
    export_labeled_csv,
    export_latency_samples,
    export_plotdata,
    fit_both,
    read_log,
)
from .metrics.analysis import METRICS, UnknownMetric, restrict
from .metrics.regression import DegenerateSeries
from .sim import NS_PER_MS, LatencyModel, Network, Scheduler

LOG_NAME = "events.log"
MANIFEST_NAME = "manifest.txt"
CONFIG_NAME = "config.toml"


class HarnessError(Exception):
    pass


class Deadlock(HarnessError):
    pass


class IncompatibleRuns(HarnessError):
    pass


class EmptyRun(HarnessError):
    pass


@dataclass(frozen=True)
class Scenario:
    config: ClientConfig = field(default_factory=ClientConfig)
    seed: int = 0
    target_size: int | None = None
    duration_ms: float | None = None
    out: Path | None = None
    latency: str = "constant:5"
    cost_clock: str = "cpu"
    stage_samples: int = 4
    heartbeat_ms: float = 1000.0
    settle_ms: float | None = None
    stall_windows: int = 50
    max_events: int | None = None
    target_budget_ms: float | None = None

    def __post_init__(self):
        if (self.target_size is None) == (self.duration_ms is None):
            raise ConfigError("set exactly one of target_size and duration_ms")
        if self.target_size is not None:
            if self.target_size < 1:
                raise ConfigError("target_size must be >= 1")
            if self.target_size > self.config.replicas:
                raise ConfigError(f"target_size {self.target_size} exceeds replicas {self.config.replicas}")
        if self.duration_ms is not None and self.duration_ms <= 0:
            raise ConfigError("duration_ms must be positive")
        try:
            LatencyModel.parse(self.latency)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.cost_clock not in ("cpu", "model"):
            raise ConfigError("cost_clock must be cpu or model")

    @property
    def replicas(self) -> int:
        return self.config.replicas

    @property
    def label(self) -> str:
        c = self.config
        paradigm = c.paradigm if c.paradigm == "commit" else f"propose{c.proposals_per_commit}"
        return f"{c.ds}-{c.auth_policy}-{paradigm}"

    def with_overrides(self, replicas=None, ds=None, policy=None, paradigm=None,
                       proposals_per_commit=None, **rest) -> "Scenario":
        if policy is not None:
            matches = [p for p in POLICIES if p.lower() == policy.lower()]
            if not matches:
                raise ConfigError(f"unknown policy {policy!r}")
            policy = matches[0]
        if paradigm is not None and paradigm not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {paradigm!r}")
        cfg = self.config.with_overrides(replicas=replicas, ds=ds, auth_policy=policy, paradigm=paradigm,
                                         proposals_per_commit=proposals_per_commit)
        return replace(self, config=cfg, **{k: v for k, v in rest.items() if v is not None})


def derive_seed(master: int, *parts) -> int:
    h = hashlib.sha256("/".join(str(p) for p in (master, *parts)).encode()).digest()
    return int.from_bytes(h[:8], "big")


def user_name(master: int, index: int) -> str:
    return "User_" + hashlib.sha256(f"{master}/user/{index}".encode()).hexdigest()[:12]


def ramp_stages(target: int) -> list[int]:
    stages = []
    s = 2
    while s < target:
        stages.append(s)
        s *= 2
    return stages + [target]


@dataclass
class RunResult:
    scenario: Scenario
    records: list[LogRecord]
    clients: list[Client]
    end_ns: int
    events: int
    directory: Path | None = None

    def log_text(self) -> str:
        return "".join(r.format() + "\n" for r in self.records)

    def counters(self) -> Counter:
        return _sum_counters(self.clients)

    def group_sizes(self) -> dict[str, int]:
        out = {}
        for g in self.scenario.config.groups:
            members = [c for c in self.clients if g in c.groups]
            out[g] = max((c.groups[g].state.member_count for c in members), default=0)
        return out


def run(scenario: Scenario) -> RunResult:
    """Simulate ``scenario`` on the virtual clock; writes the run directory if ``out`` is set."""
    cfg = scenario.config
    scheduler = Scheduler()
    network = Network(LatencyModel.parse(scenario.latency), seed=derive_seed(scenario.seed, "net"))
    hub = make_delivery(cfg.ds, scheduler, network, seed=derive_seed(scenario.seed, "ds"),
                        gossip=GossipParams(heartbeat_ms=scenario.heartbeat_ms))
    sink = LogSink()
    ramp = None
    if cfg.scale and scenario.target_size is not None:
        ramp = Ramp(ramp_stages(scenario.target_size), scenario.stage_samples)
        sink.observe(ramp.observe)

    reached: dict[str, int] = {}
    progress = {"t": 0}

    def on_record(r: LogRecord) -> None:
        progress["t"] = scheduler.now
        if r.is_commit or r.action in ("Welcome", "GroupInfo"):
            reached[r.group] = max(reached.get(r.group, 0), r.group_size)
    sink.observe(on_record)

    clients = []
    for i in range(cfg.replicas):
        cseed = derive_seed(scenario.seed, "client", i)
        clients.append(Client(user_name(scenario.seed, i), cfg, hub, sink, cseed,
                              crypto=CryptoProvider.seeded(cseed), cost_clock=scenario.cost_clock,
                              ramp=ramp))
    for c in clients:
        c.start()

    def finished() -> bool:
        if scenario.target_size is None:
            return False
        if ramp is not None:
            return all(ramp.done(g) for g in cfg.groups)
        return all(reached.get(g, 0) >= scenario.target_size for g in cfg.groups)

    stall_ns = scenario.stall_windows * max(cfg.sleep_millis_max, 1) * NS_PER_MS
    deadline = None if scenario.duration_ms is None else int(scenario.duration_ms * NS_PER_MS)
    budget = scenario.max_events
    horizon = None
    if scenario.target_size is not None:
        horizon_ms = scenario.target_budget_ms
        if horizon_ms is None:
            horizon_ms = 500 * max(cfg.sleep_millis_max, 1) * scenario.target_size
        horizon = int(horizon_ms * NS_PER_MS)
    while True:
        if finished():
            break
        if deadline is not None and (scheduler.next_time() is None or scheduler.next_time() > deadline):
            scheduler.now = max(scheduler.now, deadline)
            break
        if not scheduler.step():
            raise Deadlock("no events left to run")
        if scheduler.now - progress["t"] > stall_ns:
            raise Deadlock(
                f"no progress for {stall_ns / 1e9:.0f}s of virtual time at t={scheduler.now / 1e9:.1f}s; "
                f"group sizes {reached}; counters {dict(_sum_counters(clients))}")
        if horizon is not None and scheduler.now > horizon:
            raise Deadlock(
                f"target size {scenario.target_size} not reached within {horizon / 1e9:.0f}s of virtual time; "
                f"group sizes {reached}")
        if budget is not None and scheduler.fired >= budget:
            raise Deadlock(f"event budget {budget} exhausted; group sizes {reached}")

    for c in clients:
        c.stop()
    settle = scenario.settle_ms
    if settle is None:
        settle = 2 * hub.confirmation_window_ns / NS_PER_MS + 2000
    scheduler.run(until_ns=scheduler.now + int(settle * NS_PER_MS))

    records = sorted(sink.records, key=lambda r: r.timestamp_ns)
    result = RunResult(scenario, records, clients, scheduler.now, scheduler.fired)
    if scenario.out is not None:
        result.directory = write_run(result, Path(scenario.out))
    return result


def _sum_counters(clients: Sequence[Client]) -> Counter:
    total: Counter = Counter()
    for c in clients:
        total.update(c.counters)
    return total


def write_run(result: RunResult, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / LOG_NAME).write_text(result.log_text(), encoding="utf-8")
    (out / CONFIG_NAME).write_text(format_config(result.scenario.config), encoding="utf-8")
    sc = result.scenario
    manifest = {
        "code_version": __version__,
        "label": sc.label,
        "seed": sc.seed,
        "replicas": sc.replicas,
        "ds": sc.config.ds,
        "policy": sc.config.auth_policy,
        "paradigm": sc.config.paradigm,
        "proposals_per_commit": sc.config.proposals_per_commit,
        "target_size": sc.target_size if sc.target_size is not None else "-",
        "duration_ms": sc.duration_ms if sc.duration_ms is not None else "-",
        "latency": sc.latency,
        "cost_clock": sc.cost_clock,
        "cost_unit": "us",
        "heartbeat_ms": sc.heartbeat_ms,
        "stage_samples": sc.stage_samples,
        "config": CONFIG_NAME,
        "log": LOG_NAME,
        "records": len(result.records),
        "events": result.events,
        "virtual_end_ns": result.end_ns,
    }
    for k, v in sorted(result.counters().items()):
        manifest[f"counter.{k}"] = v
    for g, n in result.group_sizes().items():
        manifest[f"final_size.{g}"] = n
    (out / MANIFEST_NAME).write_text("".join(f"{k}={v}\n" for k, v in manifest.items()), encoding="utf-8")
    return out


def read_manifest(run_dir) -> dict[str, str]:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise EmptyRun(f"{run_dir}: no {MANIFEST_NAME}")
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out


def load_run(run_dir) -> tuple[dict[str, str], list[LogRecord]]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise EmptyRun(f"{run_dir} is not a directory")
    manifest = read_manifest(run_dir)
    log = run_dir / manifest.get("log", LOG_NAME)
    if not log.exists():
        raise EmptyRun(f"{run_dir}: no {log.name}")
    records = read_log(log)
    if not records:
        raise EmptyRun(f"{run_dir}: log is empty")
    return manifest, records


def expand_run_dirs(paths: Sequence) -> list[Path]:
    """Run directories, descending one level into directories of runs."""
    out = []
    for p in map(Path, paths):
        if (p / MANIFEST_NAME).exists():
            out.append(p)
        elif p.is_dir():
            subs = sorted(d for d in p.iterdir() if (d / MANIFEST_NAME).exists())
            if not subs:
                raise EmptyRun(f"{p} holds no runs")
            out.extend(subs)
        else:
            raise EmptyRun(f"{p} does not exist")
    return out


DEFAULT_METRICS = ("generation", "processing", "commit_size", "latency_mean", "latency_max",
                   "welcome_size", "group_info_size", "welcome_cost", "join_cost", "commit_welcome_cost",
                   "auc_generation", "auc_processing", "auc_size")


@dataclass
class Report:
    series: dict[str, dict[str, list[tuple[int, float]]]]  # metric -> label -> series
    fits: list[tuple[str, str, str, float, float, float]]
    files: list[Path]


def _file_label(label: str, many: bool) -> str:
    return f"[{label}]" if many else ""


def analyze(run_dirs: Sequence, out, metrics: Sequence[str] = DEFAULT_METRICS, bucket: str = "size",
            sizes: Sequence[int] | None = None, plots: bool = True) -> Report:
    """Series, fits and figures for the given runs.

    Runs sharing a label (same delivery service, policy and paradigm) are
    averaged bucket by bucket; each label gets its own series files.
    """
    dirs = expand_run_dirs(run_dirs)
    for m in metrics:
        if m not in METRICS:
            raise UnknownMetric(m)
    loaded = [load_run(d) for d in dirs]
    by_label: dict[str, list[list[LogRecord]]] = {}
    for manifest, records in loaded:
        by_label.setdefault(manifest.get("label", "run"), []).append(records)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    many = len(by_label) > 1
    report = Report({}, [], [])
    for metric in metrics:
        report.series[metric] = {}
        for label, runs in sorted(by_label.items()):
            series = aggregate_runs(runs, metric, bucket)
            if sizes:
                series = restrict(series, sizes)
            report.series[metric][label] = series
            stem = f"{metric}{_file_label(label, many)}"
            report.files.append(export_csv(series, out / f"{stem}.csv", metric))
            report.files.append(export_plotdata(series, out / f"{stem}.dat"))
            try:
                for model, f in fit_both(series).items():
                    report.fits.append((metric, label, model, f.slope, f.intercept, f.r_squared))
            except DegenerateSeries:
                pass
    for label, runs in sorted(by_label.items()):
        samples = [s for records in runs for s in compute_latency(records)]
        report.files.append(export_latency_samples(samples, out / f"latency_samples{_file_label(label, many)}.csv"))
    fits_path = out / "fits.csv"
    with fits_path.open("w", encoding="utf-8") as fh:
        fh.write("metric,label,model,slope,intercept,r_squared\n")
        for metric, label, model, a, b, r2 in report.fits:
            fh.write(f"{metric},{label},{model},{a!r},{b!r},{r2!r}\n")
    report.files.append(fits_path)
    if plots:
        from .plotting import plot_metric
        for metric, per_label in report.series.items():
            if any(per_label.values()):
                report.files.append(plot_metric(per_label, metric, out / f"{metric}.png"))
    return report


def compare(run_dirs: Sequence, out, metric: str = "latency_mean", bucket: str = "size",
            plots: bool = True) -> Path:
    """One labeled series per run (or per group of same-label runs), on shared buckets."""
    dirs = expand_run_dirs(run_dirs)
    if len(dirs) < 2:
        raise IncompatibleRuns("compare needs at least two runs")
    if metric not in METRICS:
        raise UnknownMetric(metric)
    columns: dict[str, list[tuple[int, float]]] = {}
    grouped: dict[str, list[list[LogRecord]]] = {}
    for d in dirs:
        manifest, records = load_run(d)
        grouped.setdefault(manifest.get("label", d.name), []).append(records)
    if len(grouped) < 2:
        raise IncompatibleRuns("all runs share one label; nothing to compare")
    for label, runs in sorted(grouped.items()):
        series = aggregate_runs(runs, metric, bucket)
        if not series:
            raise IncompatibleRuns(f"runs labeled {label} have no {metric} data")
        columns[label] = series
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = export_labeled_csv(columns, out / f"compare_{metric}.csv", metric)
    if plots:
        from .plotting import plot_metric
        plot_metric(columns, metric, out / f"compare_{metric}.png")
    return path


def scenario_from_file(path, **overrides) -> Scenario:
    cfg = load_config(path)
    return Scenario(config=cfg, **overrides)
