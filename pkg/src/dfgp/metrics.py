"""Regression metrics and per-seed summaries."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape or y.size == 0:
        raise ShapeError("metric inputs must be non-empty and of equal length")
    return y, y_hat


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def r2(y, y_hat) -> float:
    """Coefficient of determination against the mean of ``y``; NaN (with a
    warning) when ``y`` is constant."""
    y, y_hat = _pair(y, y_hat)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        warnings.warn("R^2 undefined for a constant reference; returning NaN", RuntimeWarning, stacklevel=2)
        return float("nan")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot


@dataclass
class MetricReport:
    rmse: float
    mae: float
    r2: float
    n_eval: int

    @classmethod
    def compute(cls, y, y_hat) -> "MetricReport":
        y, y_hat = _pair(y, y_hat)
        return cls(rmse(y, y_hat), mae(y, y_hat), r2(y, y_hat), int(y.size))

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(values) -> tuple[float, float]:
    """Mean and sample standard deviation; std is NaN for fewer than 2 runs."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(v)) if v.size else float("nan")
    std = float(np.std(v, ddof=1)) if v.size >= 2 else float("nan")
    return mean, std
