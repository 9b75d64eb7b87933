"""Fixed-step RK4 integration of linear-in-parameter ODE models and noisy sampling."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import TimeSeriesData
from .expr import to_source
from .model import ModelSpec, StateEquation, ic_name
from .noise import NoiseKind, NoiseModel

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

__all__ = [
    "Trajectory",
    "NonFiniteState",
    "CompiledModel",
    "compile_model",
    "solve_ode",
    "simulate_data",
    "simulate",
    "DEFAULT_SUBSTEPS",
    "initial_state",
    "logistic_closed_form",
    "even_grid",
]

DEFAULT_SUBSTEPS = 10


class NonFiniteState(ArithmeticError):
    def __init__(self, t: float):
        self.t = t
        super().__init__(f"ODE solution became non-finite at t={t:g}")


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n + 1, s)
    state_names: tuple[str, ...]
    substeps: int

    @property
    def max_step(self) -> float:
        return float(np.max(np.diff(self.times))) / self.substeps if self.times.size > 1 else 0.0


def _jit(fn):
    return numba.njit(fn) if numba is not None else fn


def _rk4_impl(rhs, x0, p, times, substeps):
    n = times.shape[0]
    s = x0.shape[0]
    out = np.empty((n, s))
    x = x0.copy()
    k1 = np.empty(s)
    k2 = np.empty(s)
    k3 = np.empty(s)
    k4 = np.empty(s)
    tmp = np.empty(s)
    for j in range(s):
        out[0, j] = x[j]
    for i in range(1, n):
        h = (times[i] - times[i - 1]) / substeps
        for _ in range(substeps):
            rhs(x, p, k1)
            for j in range(s):
                tmp[j] = x[j] + 0.5 * h * k1[j]
            rhs(tmp, p, k2)
            for j in range(s):
                tmp[j] = x[j] + 0.5 * h * k2[j]
            rhs(tmp, p, k3)
            for j in range(s):
                tmp[j] = x[j] + h * k3[j]
            rhs(tmp, p, k4)
            for j in range(s):
                x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        for j in range(s):
            if not np.isfinite(x[j]):
                return out, i
            out[i, j] = x[j]
    return out, -1


_rk4 = _jit(_rk4_impl)


def _rhs_source(equations: tuple[StateEquation, ...], s: int, params: tuple[str, ...]) -> str:
    index = {name: i for i, name in enumerate(params)}
    lines = ["def rhs(x, p, out):"]
    lines += [f"    out[{q}] = 0.0" for q in range(s)]
    for eq in equations:
        for term in eq.terms:
            coef = f"{float(term.sign)!r}"
            if term.param is not None:
                coef += f" * p[{index[term.param]}]"
            if term.divide_by is not None:
                coef += f" / p[{index[term.divide_by]}]"
            lines.append(f"    out[{eq.state}] += {coef} * {to_source(term.basis)}")
    return "\n".join(lines) + "\n"


class CompiledModel:
    """Vector field of a model compiled for repeated RK4 solves.

    Parameter vectors follow ``model.parameter_names`` order.
    """

    def __init__(self, model: ModelSpec):
        self.state_names = model.state_names
        self.parameter_names = model.parameter_names
        self.source = _rhs_source(model.equations, model.s, self.parameter_names)
        namespace: dict = {}
        exec(compile(self.source, f"<rhs:{model.name or 'model'}>", "exec"), namespace)
        self.rhs = _jit(namespace["rhs"])

    def param_vector(self, values: Mapping[str, float]) -> np.ndarray:
        missing = [n for n in self.parameter_names if n not in values]
        if missing:
            raise KeyError(f"missing parameter value(s): {', '.join(missing)}")
        return np.array([float(values[n]) for n in self.parameter_names])

    def derivative(self, x, p) -> np.ndarray:
        out = np.empty(len(self.state_names))
        self.rhs(np.asarray(x, dtype=float), np.asarray(p, dtype=float), out)
        return out

    def integrate(self, p: np.ndarray, x0: np.ndarray, times: np.ndarray,
                  substeps: int = DEFAULT_SUBSTEPS) -> tuple[np.ndarray, int]:
        """Raw solve; returns states and the first non-finite row index (or -1)."""
        return _rk4(self.rhs, np.asarray(x0, dtype=float), np.asarray(p, dtype=float),
                    np.asarray(times, dtype=float), int(substeps))


@functools.lru_cache(maxsize=32)
def _compiled(equations, s, names, key) -> CompiledModel:
    return CompiledModel(ModelSpec(names, equations, (None,) * s, name=key))


def compile_model(model: ModelSpec) -> CompiledModel:
    return _compiled(model.equations, model.s, model.state_names, model.name)


def initial_state(model: ModelSpec, x0: Sequence[float] | Mapping[str, float] | None) -> np.ndarray:
    """Resolve initial states from a vector, or a mapping keyed by state or ``ic_name``.

    Known initial conditions in the model fill any gaps.
    """
    if x0 is not None and not isinstance(x0, Mapping):
        arr = np.asarray(x0, dtype=float)
        if arr.shape != (model.s,):
            raise ValueError(f"x0 must have length {model.s}")
        return arr
    values = dict(x0 or {})
    out = np.empty(model.s)
    for q, name in enumerate(model.state_names):
        for key in (name, ic_name(name)):
            if key in values:
                out[q] = float(values[key])
                break
        else:
            known = model.initial_conditions[q]
            if known is None:
                raise KeyError(f"no initial value for state {name!r}")
            out[q] = known
    return out


def solve_ode(model: ModelSpec, params: Mapping[str, float],
              x0: Sequence[float] | Mapping[str, float] | None, times,
              substeps: int = DEFAULT_SUBSTEPS) -> Trajectory:
    """Classical RK4 with ``substeps`` equal steps per output interval."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be a strictly increasing vector")
    cm = compile_model(model)
    states, bad = cm.integrate(cm.param_vector(params), initial_state(model, x0), times, substeps)
    if bad >= 0 or not np.all(np.isfinite(states[0])):
        raise NonFiniteState(float(times[max(bad, 0)]))
    return Trajectory(times, states, model.state_names, int(substeps))


def simulate_data(traj: Trajectory, noise: NoiseModel, seed: int | np.random.Generator
                  ) -> TimeSeriesData:
    """Add independent noise to a trajectory; deterministic for a given integer seed."""
    if noise.s != traj.states.shape[1]:
        raise ValueError("noise model and trajectory have different state counts")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(traj.states.shape) * np.asarray(noise.sigmas)
    values = traj.states.copy()
    for q, kind in enumerate(noise.kinds):
        if kind is NoiseKind.LOGNORMAL:
            if np.any(values[:, q] <= 0):
                raise ValueError(f"log-normal noise needs a positive trajectory for "
                                 f"state {traj.state_names[q]!r}")
            values[:, q] = values[:, q] * np.exp(eps[:, q])
        else:
            values[:, q] = values[:, q] + eps[:, q]
    return TimeSeriesData(traj.times, values, traj.state_names)


def simulate(model: ModelSpec, params: Mapping[str, float], x0, times, noise: NoiseModel,
             seed: int, substeps: int = DEFAULT_SUBSTEPS) -> TimeSeriesData:
    return simulate_data(solve_ode(model, params, x0, times, substeps), noise, seed)


def logistic_closed_form(a: float, b: float, x0: float, times) -> np.ndarray:
    """Exact solution of ``dX/dt = aX - bX^2`` started at ``x0``."""
    t = np.asarray(times, dtype=float)
    k = a / b
    return k / (1.0 + (k - x0) / x0 * np.exp(-a * t))


def even_grid(t0: float, t1: float, n_obs: int) -> np.ndarray:
    if n_obs < 2:
        raise ValueError("need at least two observation times")
    return np.linspace(t0, t1, n_obs)

