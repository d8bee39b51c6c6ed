"""One-line event records and the append-only sink that collects them."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

ACTIONS = ("Invite", "Remove", "Update", "Join", "Propose", "Process", "ProcessProposal",
           "Welcome", "GroupInfo", "Message")
COMMIT_ACTIONS = frozenset({"Invite", "Remove", "Update", "Join"})
SIZELESS = frozenset({"Process", "ProcessProposal"})
NO_COUNTERPART = "-"


class BadLine(ValueError):
    def __init__(self, message: str, line_number: int | None = None):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}" if line_number is not None else message)


@dataclass(frozen=True)
class LogRecord:
    group: str
    group_size: int
    actor: str
    action: str
    counterpart: str
    size_bytes: int | None
    timestamp_ns: int
    cost_us: int

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if self.group_size < 1 or self.cost_us < 0 or self.timestamp_ns < 0:
            raise ValueError("group_size >= 1, cost_us >= 0 and timestamp_ns >= 0 required")
        if (self.size_bytes is None) != (self.action in SIZELESS):
            raise ValueError(f"{self.action} records {'must not' if self.action in SIZELESS else 'must'} carry a size")
        for name in ("group", "actor", "counterpart"):
            value = getattr(self, name)
            if not value or any(c.isspace() for c in value):
                raise ValueError(f"{name} must be a non-empty token")

    @property
    def is_commit(self) -> bool:
        return self.action in COMMIT_ACTIONS

    def format(self) -> str:
        fields = [self.group, str(self.group_size), self.actor, self.action, self.counterpart]
        if self.size_bytes is not None:
            fields.append(str(self.size_bytes))
        fields += [str(self.timestamp_ns), str(self.cost_us)]
        return " ".join(fields)


def _nat(token: str, what: str) -> int:
    if not token.isdigit():
        raise BadLine(f"{what} {token!r} is not a non-negative integer")
    return int(token)


def parse_line(text: str, line_number: int | None = None) -> LogRecord:
    parts = text.split()
    if len(parts) < 4:
        raise BadLine(f"expected 7 or 8 fields, got {len(parts)}", line_number)
    action = parts[3]
    expected = 7 if action in SIZELESS else 8
    if action not in ACTIONS:
        raise BadLine(f"unknown action {action!r}", line_number)
    if len(parts) != expected:
        raise BadLine(f"{action} needs {expected} fields, got {len(parts)}", line_number)
    try:
        size = None if expected == 7 else _nat(parts[5], "size")
        return LogRecord(parts[0], _nat(parts[1], "group size"), parts[2], action, parts[4], size,
                         _nat(parts[-2], "timestamp"), _nat(parts[-1], "cost"))
    except BadLine as exc:
        raise BadLine(str(exc), line_number) from None
    except ValueError as exc:
        raise BadLine(str(exc), line_number) from None


def parse_lines(lines: Iterable[str]) -> Iterator[LogRecord]:
    for n, line in enumerate(lines, 1):
        if line.strip():
            yield parse_line(line, n)


def read_log(path) -> list[LogRecord]:
    with open(path, encoding="utf-8") as fh:
        return list(parse_lines(fh))


class LogSink:
    """Thread-safe append-only record collector with optional observers."""

    def __init__(self):
        self._records: list[LogRecord] = []
        self._lock = threading.Lock()
        self._observers: list[Callable[[LogRecord], None]] = []

    def observe(self, fn: Callable[[LogRecord], None]) -> None:
        self._observers.append(fn)

    def emit(self, record: LogRecord) -> None:
        with self._lock:
            self._records.append(record)
        for fn in self._observers:
            fn(record)

    @property
    def records(self) -> list[LogRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r in self._records:
                fh.write(r.format() + "\n")
