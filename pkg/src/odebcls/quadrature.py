"""Cumulative integrals of sampled values over an observation grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["CumulativeIntegral", "cumtrapz", "cumleft", "cumulative", "RULES"]

RULES = ("trapezoid", "left_endpoint")


@dataclass(frozen=True, eq=False)
class CumulativeIntegral:
    times: np.ndarray
    values: np.ndarray  # values[0] == 0
    rule: str


def _check(samples, times) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(samples, dtype=float)
    t = np.asarray(times, dtype=float)
    if y.shape != t.shape or t.ndim != 1:
        raise ValueError(f"samples {y.shape} and times {t.shape} must be equal-length vectors")
    if t.size < 1:
        raise ValueError("need at least one sample")
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    return y, t


def cumtrapz(samples, times) -> CumulativeIntegral:
    y, t = _check(samples, times)
    z = np.zeros_like(t)
    np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t), out=z[1:])
    return CumulativeIntegral(t, z, "trapezoid")


def cumleft(samples, times) -> CumulativeIntegral:
    """Left-endpoint sums; ``z_i`` uses only samples strictly before ``t_i``."""
    y, t = _check(samples, times)
    z = np.zeros_like(t)
    np.cumsum(y[:-1] * np.diff(t), out=z[1:])
    return CumulativeIntegral(t, z, "left_endpoint")


def cumulative(samples, times, rule: str = "trapezoid") -> CumulativeIntegral:
    if rule == "trapezoid":
        return cumtrapz(samples, times)
    if rule in ("left_endpoint", "left"):
        return cumleft(samples, times)
    raise ValueError(f"unknown quadrature rule {rule!r}; choose from {RULES}")
