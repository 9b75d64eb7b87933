"""Nonlinear least squares baseline: Levenberg-Marquardt over the RK4 solution."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import TimeSeriesData
from .model import ModelSpec, ic_name
from .noise import NoiseModel
from .odesim import DEFAULT_SUBSTEPS, compile_model

__all__ = [
    "NlsConfig",
    "NlsFit",
    "ResidualFunction",
    "weighted_sse",
    "fit_nls",
    "SurfaceGrid",
    "sse_surface",
    "local_minima",
]


@dataclass(frozen=True)
class NlsConfig:
    """Start values (free parameters and/or ``ic_name`` initial conditions) and LM settings.

    ``fixed`` supplies values for everything not being estimated; ``states``
    restricts the residuals to a subset of observed states.
    """

    start: Mapping[str, float]
    fixed: Mapping[str, float] = field(default_factory=dict)
    states: tuple[str, ...] | None = None
    max_iter: int = 200
    rtol: float = 1e-10
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    fd_step: float = 1e-6
    max_nonfinite: int = 10
    lambda_max: float = 1e16
    substeps: int = DEFAULT_SUBSTEPS

    def __post_init__(self):
        for name in ("rtol", "lambda0", "lambda_up", "lambda_down", "fd_step", "lambda_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1 or self.max_nonfinite < 1:
            raise ValueError("iteration limits must be >= 1")


@dataclass(frozen=True)
class NlsFit:
    estimates: dict[str, float]
    converged: bool
    iterations: int
    sse: float
    reason: str  # converged | stalled | max_iter | diverged


class ResidualFunction:
    """Weighted residuals ``(y - X(theta)) / sigma`` for the free parameters ``theta``.

    Log-transformed states compare ``log y`` with ``log X``.  States with
    ``sigma == 0`` get unit weight.
    """

    def __init__(self, model: ModelSpec, data: TimeSeriesData, noise: NoiseModel,
                 free: Sequence[str], fixed: Mapping[str, float],
                 states: Sequence[str] | None = None, substeps: int = DEFAULT_SUBSTEPS):
        self.model = model
        self.cm = compile_model(model)
        self.free = tuple(free)
        self.times = data.times
        self.substeps = substeps
        names = model.parameter_names
        ics = model.ic_names
        known = {ic_name(n): v for n, v in zip(model.state_names, model.initial_conditions)
                 if v is not None}
        base = {**known, **fixed}
        unknown = [f for f in self.free if f not in names and f not in ics]
        if unknown:
            raise KeyError(f"unknown parameter(s) {', '.join(unknown)}")
        missing = [n for n in names + ics if n not in base and n not in self.free]
        if missing:
            raise KeyError(f"no value for {', '.join(missing)}; add to start or fixed")
        self._p = np.array([float(base.get(n, np.nan)) for n in names])
        self._x0 = np.array([float(base.get(n, np.nan)) for n in ics])
        self._slots = []
        for f in self.free:
            if f in names:
                self._slots.append((0, names.index(f)))
            else:
                self._slots.append((1, ics.index(f)))
        sel = model.state_names if states is None else tuple(states)
        self.state_idx = np.array([model.state_index(s) for s in sel])
        obs = data.values[:, self.state_idx]
        self.log_mask = np.array([model.transform_of(q) == "log" for q in self.state_idx])
        if np.any(self.log_mask):
            with np.errstate(divide="ignore", invalid="ignore"):
                obs = np.where(self.log_mask, np.log(obs), obs)
        self.obs = obs
        sig = np.array([noise.sigmas[q] for q in self.state_idx])
        self.weights = 1.0 / np.where(sig > 0, sig, 1.0)

    def values(self, theta) -> dict[str, float]:
        out = dict(zip(self.model.parameter_names, self._p))
        out.update(zip(self.model.ic_names, self._x0))
        out.update(zip(self.free, (float(v) for v in theta)))
        return out

    def __call__(self, theta) -> np.ndarray:
        """Flattened residual vector; non-finite entries when the solve fails."""
        p = self._p.copy()
        x0 = self._x0.copy()
        for (kind, i), v in zip(self._slots, theta):
            (p if kind == 0 else x0)[i] = v
        X, bad = self.cm.integrate(p, x0, self.times, self.substeps)
        if bad >= 0:
            return np.full(self.obs.size, np.inf)
        X = X[:, self.state_idx]
        if np.any(self.log_mask):
            with np.errstate(divide="ignore", invalid="ignore"):
                X = np.where(self.log_mask, np.log(np.where(X > 0, X, np.nan)), X)
        r = (self.obs - X) * self.weights
        r[~np.isfinite(r)] = np.inf
        return r.ravel()

    def jacobian(self, theta, r0, rel_step: float) -> np.ndarray:
        """Forward differences, one perturbed solve per free parameter."""
        theta = np.asarray(theta, dtype=float)
        J = np.empty((r0.size, theta.size))
        for j in range(theta.size):
            h = rel_step * max(abs(theta[j]), 1e-8)
            t = theta.copy()
            t[j] += h
            J[:, j] = (self(t) - r0) / h
        return J


def weighted_sse(model: ModelSpec, values: Mapping[str, float], data: TimeSeriesData,
                 noise: NoiseModel, states: Sequence[str] | None = None,
                 substeps: int = DEFAULT_SUBSTEPS) -> float:
    """``sum_q sum_i (y_qi - X_q(t_i))^2 / sigma_q^2``; ``inf`` if the solve blows up."""
    res = ResidualFunction(model, data, noise, (), values, states, substeps)
    r = res(())
    return float(r @ r) if np.all(np.isfinite(r)) else math.inf


def fit_nls(model: ModelSpec, data: TimeSeriesData, noise: NoiseModel,
            config: NlsConfig) -> NlsFit:
    """Levenberg-Marquardt with Marquardt diagonal scaling.

    Each iteration solves ``(J'J + lambda diag(J'J)) delta = -J'r``.  Rejected
    trial steps raise ``lambda`` by ``lambda_up``; accepted ones lower it by
    ``lambda_down``.  Convergence is an accepted step whose relative SSE
    decrease is below ``rtol``, or a point no damped step can improve on.
    """
    free = tuple(config.start)
    res = ResidualFunction(model, data, noise, free, config.fixed, config.states,
                           config.substeps)
    theta = np.array([float(config.start[f]) for f in free])

    def done(converged, it, sse, reason):
        est = {k: float(v) for k, v in zip(free, theta)}
        return NlsFit(est, converged, it, sse, reason)

    if not np.all(np.isfinite(theta)):
        return done(False, 0, math.inf, "diverged")
    r = res(theta)
    if not np.all(np.isfinite(r)):
        return done(False, 0, math.inf, "diverged")
    sse = float(r @ r)
    lam = config.lambda0
    nonfinite = 0
    for it in range(1, config.max_iter + 1):
        J = res.jacobian(theta, r, config.fd_step)
        if not np.all(np.isfinite(J)):
            nonfinite += 1
            if nonfinite >= config.max_nonfinite:
                return done(False, it, sse, "diverged")
            J[~np.isfinite(J)] = 0.0
        A = J.T @ J
        g = J.T @ r
        scale = np.diag(A).copy()
        scale[scale <= 0] = 1.0
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(scale), -g)
            except np.linalg.LinAlgError:
                step = np.full_like(theta, np.nan)
            trial = theta + step
            r_new = res(trial) if np.all(np.isfinite(trial)) else np.array([np.inf])
            if np.all(np.isfinite(r_new)):
                sse_new = float(r_new @ r_new)
                if sse_new <= sse:
                    break
            else:
                nonfinite += 1
                if nonfinite >= config.max_nonfinite:
                    return done(False, it, sse, "diverged")
            lam *= config.lambda_up
            if lam > config.lambda_max:
                return done(True, it, sse, "stalled")
        rel = (sse - sse_new) / sse if sse > 0 else 0.0
        theta, r, sse = trial, r_new, sse_new
        lam = max(lam * config.lambda_down, 1e-300)
        if rel < config.rtol:
            return done(True, it, sse, "converged")
    return done(False, config.max_iter, sse, "max_iter")


# --------------------------------------------------------------------------
# SSE surfaces


@dataclass(frozen=True, eq=False)
class SurfaceGrid:
    param1: str
    param2: str
    values1: np.ndarray
    values2: np.ndarray
    sse: np.ndarray  # rows follow values1

    def rows(self):
        for i, u in enumerate(self.values1):
            for j, v in enumerate(self.values2):
                yield float(u), float(v), float(self.sse[i, j])

    def to_csv(self) -> str:
        lines = [f"{self.param1},{self.param2},sse"]
        lines += [f"{u!r},{v!r},{s!r}" for u, v, s in self.rows()]
        return "\n".join(lines) + "\n"


def sse_surface(model: ModelSpec, data: TimeSeriesData, noise: NoiseModel,
                axis1: tuple[str, float, float, int], axis2: tuple[str, float, float, int],
                fixed: Mapping[str, float], states: Sequence[str] | None = None,
                substeps: int = DEFAULT_SUBSTEPS) -> SurfaceGrid:
    """Weighted SSE on the Cartesian grid ``axis1 x axis2`` (``(name, lo, hi, steps)``)."""
    (p1, lo1, hi1, n1), (p2, lo2, hi2, n2) = axis1, axis2
    if n1 < 1 or n2 < 1 or (n1 > 1 and hi1 <= lo1) or (n2 > 1 and hi2 <= lo2):
        raise ValueError("degenerate surface grid")
    u = np.linspace(lo1, hi1, n1)
    v = np.linspace(lo2, hi2, n2)
    res = ResidualFunction(model, data, noise, (p1, p2), fixed, states, substeps)
    sse = np.empty((n1, n2))
    for i, a in enumerate(u):
        for j, b in enumerate(v):
            r = res((a, b))
            sse[i, j] = float(r @ r) if np.all(np.isfinite(r)) else math.inf
    return SurfaceGrid(p1, p2, u, v, sse)


def local_minima(grid: SurfaceGrid) -> list[tuple[float, float, float]]:
    """Interior cells whose SSE is <= all 8 neighbours, as ``(u, v, sse)``."""
    s = grid.sse
    out = []
    for i in range(1, s.shape[0] - 1):
        for j in range(1, s.shape[1] - 1):
            c = s[i, j]
            if np.isfinite(c) and c <= s[i - 1:i + 2, j - 1:j + 2].min():
                out.append((float(grid.values1[i]), float(grid.values2[j]), float(c)))
    return sorted(out, key=lambda m: m[2])
