"""Virtual clock, event scheduler and per-link latency models."""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable

NS_PER_MS = 1_000_000


class Scheduler:
    """Deterministic discrete-event loop over a virtual nanosecond clock.

    Events at the same instant fire in scheduling order.
    """

    def __init__(self, start_ns: int = 0):
        self.now = start_ns
        self._queue: list[tuple[int, int, Callable, tuple]] = []
        self._seq = 0
        self.fired = 0

    def at(self, t_ns: int, fn: Callable, *args) -> None:
        if t_ns < self.now:
            t_ns = self.now
        heapq.heappush(self._queue, (t_ns, self._seq, fn, args))
        self._seq += 1

    def after(self, delay_ns: int, fn: Callable, *args) -> None:
        self.at(self.now + max(0, int(delay_ns)), fn, *args)

    def pending(self) -> int:
        return len(self._queue)

    def next_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        if not self._queue:
            return False
        t, _, fn, args = heapq.heappop(self._queue)
        self.now = t
        self.fired += 1
        fn(*args)
        return True

    def run(self, until_ns: int | None = None, stop: Callable[[], bool] | None = None,
            max_events: int | None = None) -> None:
        n = 0
        while self._queue:
            if until_ns is not None and self._queue[0][0] > until_ns:
                self.now = until_ns
                return
            if stop is not None and stop():
                return
            if max_events is not None and n >= max_events:
                return
            self.step()
            n += 1


@dataclass(frozen=True)
class LatencyModel:
    """Link latency distribution. Parameters are in milliseconds.

    ``constant``: ``value``; ``uniform``: ``low``..``high``;
    ``normal``: ``mean``/``std`` truncated at zero.
    """

    kind: str = "constant"
    params: tuple[tuple[str, float], ...] = (("value", 5.0),)

    @classmethod
    def constant(cls, ms: float) -> "LatencyModel":
        return cls("constant", (("value", float(ms)),))

    @classmethod
    def uniform(cls, low_ms: float, high_ms: float) -> "LatencyModel":
        if low_ms < 0 or high_ms < low_ms:
            raise ValueError("need 0 <= low <= high")
        return cls("uniform", (("low", float(low_ms)), ("high", float(high_ms))))

    @classmethod
    def normal(cls, mean_ms: float, std_ms: float) -> "LatencyModel":
        if std_ms < 0:
            raise ValueError("std must be non-negative")
        return cls("normal", (("mean", float(mean_ms)), ("std", float(std_ms))))

    @classmethod
    def parse(cls, text: str) -> "LatencyModel":
        """``"constant:5"``, ``"uniform:2,8"`` or ``"normal:5,1"``."""
        kind, _, rest = text.partition(":")
        values = [float(v) for v in rest.split(",") if v.strip()]
        try:
            return {"constant": cls.constant, "uniform": cls.uniform, "normal": cls.normal}[kind](*values)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"bad latency model {text!r}") from exc

    def describe(self) -> str:
        return f"{self.kind}:" + ",".join(f"{v:g}" for _, v in self.params)

    def sample_ms(self, rng: random.Random) -> float:
        p = dict(self.params)
        if self.kind == "constant":
            return p["value"]
        if self.kind == "uniform":
            return rng.uniform(p["low"], p["high"])
        if self.kind == "normal":
            return max(0.0, rng.gauss(p["mean"], p["std"]))
        raise ValueError(f"unknown latency model {self.kind}")

    def sample_ns(self, rng: random.Random) -> int:
        return int(round(self.sample_ms(rng) * NS_PER_MS))


@dataclass
class Network:
    """Per-link latency lookup driven by one seeded stream."""

    default: LatencyModel = field(default_factory=lambda: LatencyModel.constant(5.0))
    seed: int = 0
    links: dict[tuple[str, str], LatencyModel] = field(default_factory=dict)

    def __post_init__(self):
        self._rng = random.Random(self.seed)

    def set_link(self, src: str, dst: str, model: LatencyModel) -> None:
        self.links[(src, dst)] = model

    def latency_ns(self, src: str, dst: str) -> int:
        if src == dst:
            return 0
        return self.links.get((src, dst), self.default).sample_ns(self._rng)
