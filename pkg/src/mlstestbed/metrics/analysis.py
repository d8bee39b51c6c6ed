"""Latency pairing, average update cost and per-group-size aggregation."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .log import LogRecord

Series = list[tuple[int, float]]


class BadArity(ValueError):
    pass


class OrphanProcess(UserWarning):
    """Process records that could not be matched to any commit."""


class UnknownMetric(ValueError):
    pass


def auc(cc: float, cp: Sequence[float], n: int) -> float:
    """(cc + sum(cp)) / n with cp either empty or one cost per modification."""
    if n < 1 or len(cp) not in (0, n):
        raise BadArity(f"need n >= 1 and len(cp) in {{0, {n}}}, got n={n}, len(cp)={len(cp)}")
    return (cc + sum(cp)) / n


def _sorted(records: Iterable[LogRecord]) -> list[LogRecord]:
    return sorted(records, key=lambda r: r.timestamp_ns)


@dataclass(frozen=True)
class LatencySample:
    commit: LogRecord
    processes: tuple[LogRecord, ...]

    @property
    def commit_id(self) -> str:
        c = self.commit
        return f"{c.group}:{c.actor}:{c.timestamp_ns}"

    @property
    def generated_ns(self) -> int:
        return self.commit.timestamp_ns

    @property
    def latencies_ns(self) -> list[int]:
        return [p.timestamp_ns - self.commit.timestamp_ns for p in self.processes]

    @property
    def flagged(self) -> bool:
        """True when nobody processed the commit and mean/max are undefined."""
        return not self.processes

    @property
    def mean_latency_ns(self) -> float | None:
        lat = self.latencies_ns
        return sum(lat) / len(lat) if lat else None

    @property
    def max_latency_ns(self) -> int | None:
        lat = self.latencies_ns
        return max(lat) if lat else None


def pair_commits(records: Iterable[LogRecord]) -> tuple[list[LatencySample], list[LogRecord]]:
    """Match each Process record to the latest earlier commit by its counterpart.

    Returns the samples in commit order and the unmatched Process records.
    """
    commits: list[LogRecord] = []
    attached: dict[int, list[LogRecord]] = {}
    latest: dict[tuple[str, str], int] = {}
    orphans: list[LogRecord] = []
    for r in _sorted(records):
        if r.is_commit:
            latest[(r.group, r.actor)] = len(commits)
            attached[len(commits)] = []
            commits.append(r)
        elif r.action == "Process":
            idx = latest.get((r.group, r.counterpart))
            if idx is None:
                orphans.append(r)
            else:
                attached[idx].append(r)
    return [LatencySample(c, tuple(attached[i])) for i, c in enumerate(commits)], orphans


def compute_latency(records: Iterable[LogRecord]) -> list[LatencySample]:
    samples, orphans = pair_commits(records)
    if orphans:
        warnings.warn(OrphanProcess(f"{len(orphans)} Process record(s) without a matching commit"),
                      stacklevel=2)
    return samples


@dataclass(frozen=True)
class UpdateCostSample:
    commit: LogRecord
    cc: float
    cp: tuple[float, ...]
    n: int

    @property
    def auc(self) -> float:
        return auc(self.cc, self.cp, self.n)


def _windows(records: Iterable[LogRecord]):
    """Yield (commit, records of that group since the previous commit)."""
    by_group: dict[str, list[LogRecord]] = defaultdict(list)
    for r in _sorted(records):
        if r.is_commit:
            yield r, by_group.pop(r.group, [])
        else:
            by_group[r.group].append(r)


def update_cost_samples(records: Iterable[LogRecord], measure: str = "generation") -> list[UpdateCostSample]:
    """One sample per commit.

    Proposals generated in a group since its previous commit are attributed
    to the next commit. ``measure`` picks the quantity: ``generation`` and
    ``size`` use the commit and Propose records; ``processing`` uses the mean
    Process cost of the commit plus, per proposal, the mean ProcessProposal
    cost observed in the same window.
    """
    records = list(records)
    process_mean: dict[str, float] = {}
    if measure == "processing":
        for s in pair_commits(records)[0]:
            if s.processes:
                process_mean[s.commit_id] = sum(p.cost_us for p in s.processes) / len(s.processes)
    out = []
    for commit, window in _windows(records):
        props = [r for r in window if r.action == "Propose"] if commit.action != "Join" else []
        n = max(1, len(props))
        if measure == "generation":
            cc, cp = float(commit.cost_us), tuple(float(p.cost_us) for p in props)
        elif measure == "size":
            cc, cp = float(commit.size_bytes), tuple(float(p.size_bytes) for p in props)
        elif measure == "processing":
            cid = f"{commit.group}:{commit.actor}:{commit.timestamp_ns}"
            if cid not in process_mean:
                continue
            cc = process_mean[cid]
            handled = [r.cost_us for r in window if r.action == "ProcessProposal"]
            per = sum(handled) / len(handled) if handled else 0.0
            cp = tuple(per for _ in props)
        else:
            raise UnknownMetric(measure)
        out.append(UpdateCostSample(commit, cc, cp, n))
    return out


# -- metric catalogue ------------------------------------------------------------

def _action_values(actions: frozenset[str] | None, field: str, extra: Callable[[LogRecord], bool] | None = None):
    def values(records):
        for r in records:
            if (actions is None or r.action in actions) and (extra is None or extra(r)):
                yield r.group_size, float(getattr(r, field))
    return values


_COMMITS = frozenset({"Invite", "Remove", "Update", "Join"})
_MEMBER_COMMITS = frozenset({"Invite", "Remove", "Update"})


def _latency(kind: str):
    def values(records):
        for s in compute_latency(records):
            v = s.mean_latency_ns if kind == "mean" else s.max_latency_ns
            if v is not None:
                yield s.commit.group_size, v / 1e6
    return values


def _auc(measure: str):
    def values(records):
        for s in update_cost_samples(records, measure):
            if s.commit.action != "Join":
                yield s.commit.group_size, s.auc
    return values


def _commit_plus_welcome(records):
    """Invite generation cost plus the Welcome processing cost it caused."""
    records = _sorted(records)
    welcome_cost: dict[tuple[str, str], list[int]] = defaultdict(list)
    for r in records:
        if r.action == "Welcome":
            welcome_cost[(r.group, r.actor)].append(r.cost_us)
    for r in records:
        if r.action == "Invite" and welcome_cost.get((r.group, r.counterpart)):
            yield r.group_size, float(r.cost_us + welcome_cost[(r.group, r.counterpart)].pop(0))


METRICS: dict[str, Callable[[list[LogRecord]], Iterable[tuple[int, float]]]] = {
    "generation": _action_values(_MEMBER_COMMITS, "cost_us"),
    "processing": _action_values(frozenset({"Process"}), "cost_us"),
    "commit_size": _action_values(_MEMBER_COMMITS, "size_bytes"),
    "invite_cost": _action_values(frozenset({"Invite"}), "cost_us"),
    "remove_cost": _action_values(frozenset({"Remove"}), "cost_us"),
    "update_cost": _action_values(frozenset({"Update"}), "cost_us"),
    "join_cost": _action_values(frozenset({"Join"}), "cost_us"),
    "join_size": _action_values(frozenset({"Join"}), "size_bytes"),
    "propose_cost": _action_values(frozenset({"Propose"}), "cost_us"),
    "welcome_cost": _action_values(frozenset({"Welcome"}), "cost_us"),
    "welcome_size": _action_values(frozenset({"Welcome"}), "size_bytes"),
    "group_info_size": _action_values(frozenset({"GroupInfo"}), "size_bytes"),
    "commit_welcome_cost": _commit_plus_welcome,
    "latency_mean": _latency("mean"),
    "latency_max": _latency("max"),
    "auc_generation": _auc("generation"),
    "auc_processing": _auc("processing"),
    "auc_size": _auc("size"),
}


def octave(size: int) -> int:
    """Largest power of two not above ``size``."""
    return 1 << (size.bit_length() - 1)


BUCKETS: dict[str, Callable[[int], int]] = {"size": lambda s: s, "octave": octave}


def metric_values(records: Iterable[LogRecord], metric: str) -> list[tuple[int, float]]:
    try:
        fn = METRICS[metric]
    except KeyError:
        raise UnknownMetric(f"unknown metric {metric!r}; known: {', '.join(sorted(METRICS))}") from None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OrphanProcess)
        return list(fn(list(records)))


def aggregate(records: Iterable[LogRecord], metric: str, bucket: str = "size") -> Series:
    """Mean of ``metric`` per bucket of group size, buckets ascending."""
    key = BUCKETS[bucket]
    sums: dict[int, list[float]] = defaultdict(list)
    for size, v in metric_values(records, metric):
        sums[key(size)].append(v)
    return [(b, math.fsum(vs) / len(vs)) for b, vs in sorted(sums.items())]


def aggregate_runs(runs: Sequence[Iterable[LogRecord]], metric: str, bucket: str = "size") -> Series:
    """Average of the per-run bucket means (runs lacking a bucket are skipped)."""
    per_bucket: dict[int, list[float]] = defaultdict(list)
    for records in runs:
        for b, v in aggregate(records, metric, bucket):
            per_bucket[b].append(v)
    return [(b, math.fsum(vs) / len(vs)) for b, vs in sorted(per_bucket.items())]


def restrict(series: Series, sizes: Iterable[int]) -> Series:
    keep = set(sizes)
    return [(x, y) for x, y in series if x in keep]
