"""CSV and plot-data writers and their readers."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

from .analysis import LatencySample, Series


class IoError(OSError):
    pass


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _num(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def export_csv(series: Series, path, metric: str) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group_size", metric])
            for x, y in series:
                w.writerow([_fmt(x), _fmt(y)])
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def read_csv(path) -> tuple[str, Series]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "group_size":
        raise ValueError(f"{path}: missing group_size header")
    return rows[0][1], [(_num(a), _num(b)) for a, b in rows[1:]]


def export_labeled_csv(columns: dict[str, Series], path, metric: str) -> Path:
    """Several labeled series aligned on their shared group sizes."""
    path = Path(path)
    shared = sorted(set.intersection(*(set(x for x, _ in s) for s in columns.values()))) if columns else []
    lookup = {label: dict(s) for label, s in columns.items()}
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group_size"] + [f"{metric}[{label}]" for label in columns])
            for x in shared:
                w.writerow([x] + [_fmt(lookup[label][x]) for label in columns])
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def export_latency_samples(samples: Iterable[LatencySample], path) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["commit_id", "group_size", "generated_ns", "members", "mean_latency_ns",
                        "max_latency_ns"])
            for s in samples:
                w.writerow([s.commit_id, s.commit.group_size, s.generated_ns, len(s.processes),
                            "" if s.flagged else _fmt(s.mean_latency_ns),
                            "" if s.flagged else s.max_latency_ns])
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def export_plotdata(series: Sequence[tuple[float, float]], path) -> Path:
    path = Path(path)
    try:
        path.write_text("".join(f"{_fmt(x)} {_fmt(y)}\n" for x, y in series), encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return path


def read_plotdata(path) -> Series:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            a, b = line.split()
            out.append((_num(a), _num(b)))
    return out
