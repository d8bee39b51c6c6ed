"""Least-squares linear and logarithmic fits with R²."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MODELS = ("linear", "logarithmic")


class DegenerateSeries(ValueError):
    pass


@dataclass(frozen=True)
class RegressionFit:
    model: str
    slope: float
    intercept: float
    r_squared: float

    def predict(self, x: float) -> float:
        t = np.log(x) if self.model == "logarithmic" else x
        return float(self.slope * t + self.intercept)


def r_squared(y: np.ndarray, y_hat: np.ndarray) -> float:
    ss_res = float(np.sum((y - y_hat) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return min(1.0, max(0.0, 1.0 - ss_res / ss_tot))


def fit(series: Sequence[tuple[float, float]], model: str = "linear") -> RegressionFit:
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    if len(series) < 3:
        raise DegenerateSeries(f"need at least 3 points, got {len(series)}")
    x = np.array([p[0] for p in series], dtype=float)
    y = np.array([p[1] for p in series], dtype=float)
    if np.all(x == x[0]):
        raise DegenerateSeries("x is constant")
    if model == "logarithmic":
        if np.any(x <= 0):
            raise DegenerateSeries("logarithmic fit needs x > 0")
        x = np.log(x)
    slope, intercept = np.polyfit(x, y, 1)
    return RegressionFit(model, float(slope), float(intercept), r_squared(y, slope * x + intercept))


def fit_both(series: Sequence[tuple[float, float]]) -> dict[str, RegressionFit]:
    return {m: fit(series, m) for m in MODELS}
