"""Monte Carlo experiments, bootstrap intervals and consistency sweeps."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .bcls import BclsFit, fit_bcls, refit_stage_responses, response_components
from .data import TimeSeriesData
from .model import ModelSpec, StagePlan, builtin_model, ic_name
from .nls import NlsConfig, fit_nls
from .noise import NoiseModel
from .odesim import DEFAULT_SUBSTEPS, even_grid, simulate_data, solve_ode

__all__ = [
    "BASE_METHODS",
    "McConfig",
    "McRow",
    "McSummary",
    "run_monte_carlo",
    "ConfidenceInterval",
    "percentile_intervals",
    "parametric_bootstrap",
    "parametric_bootstrap_samples",
    "nonparametric_bootstrap",
    "nonparametric_bootstrap_samples",
    "SweepRow",
    "consistency_sweep",
    "SCENARIOS",
    "scenario",
    "intervals_to_csv",
]

BASE_METHODS = ("BCLS", "LS", "NLS_truth", "NLS_bcls")


def _start_method(label: str) -> str:
    return f"NLS_start[{label}]"


@dataclass(frozen=True)
class McConfig:
    """One Monte Carlo study.

    Every combination of ``sigma_levels`` and ``grids`` (``(t0, t1, n_obs)``)
    is a scenario cell.  ``truth`` holds parameter values and initial
    conditions keyed by ``ic_name``; known initial conditions may be omitted.
    ``starts`` maps labels to fixed NLS starting values, each of which adds the
    method ``NLS_start[label]``.
    """

    model: ModelSpec
    truth: Mapping[str, float]
    noise: NoiseModel
    sigma_levels: tuple[tuple[float, ...], ...]
    grids: tuple[tuple[float, float, int], ...]
    replicates: int
    methods: tuple[str, ...] = ("BCLS", "LS")
    starts: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    nls_free: tuple[str, ...] | None = None
    nls_states: tuple[str, ...] | None = None
    base_seed: int = 0
    substeps: int = DEFAULT_SUBSTEPS
    rule: str = "trapezoid"
    name: str = "mc"
    plan: StagePlan | None = None

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.sigma_levels or not self.grids:
            raise ValueError("need at least one sigma level and one grid")
        for lvl in self.sigma_levels:
            if len(lvl) != self.model.s:
                raise ValueError(f"sigma level {lvl} needs one value per state")
        for m in self.methods:
            if m not in BASE_METHODS:
                raise ValueError(f"unknown method {m!r}")
        free = self.free_parameters
        for label, start in self.starts.items():
            missing = [p for p in free if p not in start]
            if missing:
                raise ValueError(f"start {label!r} lacks {', '.join(missing)}")
        values = self.truth_values
        missing = [p for p in self.model.parameter_names + self.model.ic_names if p not in values]
        if missing:
            raise ValueError(f"truth lacks {', '.join(missing)}")

    @property
    def free_parameters(self) -> tuple[str, ...]:
        if self.nls_free is not None:
            return tuple(self.nls_free)
        return self.model.parameter_names + self.model.estimated_ics

    @property
    def truth_values(self) -> dict[str, float]:
        known = {ic_name(n): v for n, v in zip(self.model.state_names,
                                               self.model.initial_conditions) if v is not None}
        return {**known, **{k: float(v) for k, v in self.truth.items()}}

    @property
    def all_methods(self) -> tuple[str, ...]:
        return tuple(self.methods) + tuple(_start_method(k) for k in self.starts)

    def cells(self) -> list[tuple[tuple[float, ...], tuple[float, float, int]]]:
        return [(lvl, grid) for lvl in self.sigma_levels for grid in self.grids]

    def method_parameters(self, method: str) -> tuple[str, ...]:
        if method in ("BCLS", "LS"):
            return self.model.parameter_names + self.model.estimated_ics
        return self.free_parameters


@dataclass(frozen=True)
class McRow:
    scenario: str
    method: str
    param: str
    mean: float
    mc_sd: float
    bias: float
    conv_rate: float | None
    used: int
    failures: int

    @property
    def mc_se(self) -> float:
        """Standard error of the Monte Carlo mean."""
        return self.mc_sd / math.sqrt(self.used) if self.used > 0 else math.nan


@dataclass(frozen=True, eq=False)
class McSummary:
    """Aggregated results plus the raw per-replicate estimates.

    ``estimates[(scenario, method)]`` is ``(R, p)`` with NaN rows for failed or
    non-converged replicates; ``converged[(scenario, method)]`` is a boolean
    vector.
    """

    rows: tuple[McRow, ...]
    estimates: dict
    converged: dict
    failures: dict
    scenarios: tuple[str, ...]

    def row(self, method: str, param: str, scenario: str | None = None) -> McRow:
        for r in self.rows:
            if r.method == method and r.param == param and (scenario is None or r.scenario == scenario):
                return r
        raise KeyError((scenario, method, param))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "method", "param", "mean", "mc_sd", "bias", "conv_rate"])
        for r in self.rows:
            w.writerow([r.scenario, r.method, r.param, repr(r.mean), repr(r.mc_sd), repr(r.bias),
                        "" if r.conv_rate is None else repr(r.conv_rate)])
        return buf.getvalue()


def _cell_label(config: McConfig, sigma, grid) -> str:
    sig = "/".join(f"{s:g}" for s in sigma)
    return f"{config.name}:sigma={sig}:n={grid[2]}"


def _replicate(config: McConfig, cell: int, r: int) -> dict:
    """All methods on one simulated dataset: ``method -> (values | None, converged, failed)``."""
    sigma, grid = config.cells()[cell]
    model = config.model
    truth = config.truth_values
    noise = config.noise.with_sigmas(sigma)
    times = even_grid(*grid)
    traj = solve_ode(model, truth, truth, times, config.substeps)
    data = simulate_data(traj, noise, config.base_seed + r)
    out: dict = {}
    bcls = None
    if "BCLS" in config.methods or "NLS_bcls" in config.methods:
        try:
            bcls = fit_bcls(model, data, noise, config.plan, config.rule, corrected=True)
        except Exception:  # recorded, never fatal for the sweep
            bcls = None
    if "BCLS" in config.methods:
        out["BCLS"] = (None, False, True) if bcls is None else (bcls.estimates, True, False)
    if "LS" in config.methods:
        try:
            ls = fit_bcls(model, data, noise, config.plan, config.rule, corrected=False)
            out["LS"] = (ls.estimates, True, False)
        except Exception:
            out["LS"] = (None, False, True)
    free = config.free_parameters
    fixed = {k: v for k, v in truth.items() if k not in free}
    starts = {}
    if "NLS_truth" in config.methods:
        starts["NLS_truth"] = {p: truth[p] for p in free}
    if "NLS_bcls" in config.methods:
        starts["NLS_bcls"] = None if bcls is None else {p: bcls.estimates[p] for p in free}
    for label, start in config.starts.items():
        starts[_start_method(label)] = {p: float(start[p]) for p in free}
    for method, start in starts.items():
        if start is None:
            out[method] = (None, False, True)
            continue
        try:
            fit = fit_nls(model, data, noise, NlsConfig(
                start, fixed, config.nls_states, substeps=config.substeps))
            out[method] = (fit.estimates, fit.converged, False)
        except Exception:
            out[method] = (None, False, True)
    return out


def _task(args):
    config, cell, rs = args
    return [(r, _replicate(config, cell, r)) for r in rs]


def run_monte_carlo(config: McConfig, threads: int = 1) -> McSummary:
    """Simulate ``config.replicates`` datasets per cell and run every method on each.

    Replicate ``r`` uses seed ``base_seed + r`` in every cell.  Results are
    keyed by replicate index before reduction, so the summary does not depend
    on ``threads``.
    """
    cells = config.cells()
    R = config.replicates
    per_cell: list[dict] = [dict() for _ in cells]
    if threads > 1:
        chunk = max(1, R // (4 * threads))
        jobs = [(config, c, range(i, min(i + chunk, R))) for c in range(len(cells))
                for i in range(0, R, chunk)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for (_, c, _), results in zip(jobs, pool.map(_task, jobs)):
                per_cell[c].update(results)
    else:
        for c in range(len(cells)):
            per_cell[c].update(_task((config, c, range(R))))
    truth = config.truth_values
    rows, estimates, converged, failures, labels = [], {}, {}, {}, []
    for c, (sigma, grid) in enumerate(cells):
        label = _cell_label(config, sigma, grid)
        labels.append(label)
        for method in config.all_methods:
            params = config.method_parameters(method)
            est = np.full((R, len(params)), np.nan)
            conv = np.zeros(R, dtype=bool)
            failed = 0
            for r in range(R):
                values, ok, bad = per_cell[c][r][method]
                failed += bad
                conv[r] = ok
                if ok and values is not None:
                    est[r] = [values[p] for p in params]
            usable = conv & np.all(np.isfinite(est), axis=1)
            used = int(usable.sum())
            is_nls = method.startswith("NLS")
            for j, p in enumerate(params):
                col = est[usable, j]
                mean = float(col.mean()) if used else math.nan
                sd = float(col.std(ddof=1)) if used > 1 else (0.0 if used == 1 else math.nan)
                rows.append(McRow(label, method, p, mean, sd, mean - truth[p],
                                  float(conv.sum()) / R if is_nls else None, used, failed))
            estimates[(label, method)] = est
            converged[(label, method)] = conv
            failures[(label, method)] = failed
    return McSummary(tuple(rows), estimates, converged, failures, tuple(labels))


# --------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class ConfidenceInterval:
    param: str
    lower: float
    upper: float
    level: float
    kind: str
    replicates: int


def percentile_intervals(samples, names: Sequence[str], level: float = 0.95,
                         kind: str = "parametric") -> list[ConfidenceInterval]:
    """Percentile intervals from ``(B, p)`` resample estimates; NaN rows are dropped.

    Uses the inverse of the empirical CDF, so with two resamples the 95%
    interval spans their minimum and maximum.
    """
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    x = np.asarray(samples, dtype=float)
    x = x[np.all(np.isfinite(x), axis=1)]
    if x.shape[0] == 0:
        raise ValueError("no successful bootstrap resamples")
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(x, [alpha, 1.0 - alpha], axis=0, method="inverted_cdf")
    return [ConfidenceInterval(n, float(l), float(h), level, kind, x.shape[0])
            for n, l, h in zip(names, lo, hi)]


def _seeds(seed: int, B: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(B)]


def parametric_bootstrap_samples(model: ModelSpec, fit: BclsFit, noise: NoiseModel, times, B: int,
                                 seed: int, corrected: bool = True,
                                 substeps: int = DEFAULT_SUBSTEPS) -> tuple[tuple[str, ...], np.ndarray]:
    """Re-simulate ``B`` datasets from the fitted model and refit each with BCLS."""
    if B < 1:
        raise ValueError("B must be >= 1")
    values = {**fit.estimates}
    for n, v in zip(model.state_names, model.initial_conditions):
        if v is not None:
            values.setdefault(ic_name(n), v)
    traj = solve_ode(model, values, values, times, substeps)
    names = model.parameter_names + model.estimated_ics
    out = np.full((B, len(names)), np.nan)
    for b, rng in enumerate(_seeds(seed, B)):
        data = simulate_data(traj, noise, rng)
        try:
            est = fit_bcls(model, data, noise, fit.plan, fit.rule, corrected, check=False).estimates
        except Exception:
            continue
        out[b] = [est[n] for n in names]
    return names, out


def parametric_bootstrap(model: ModelSpec, fit: BclsFit, noise: NoiseModel, times, B: int,
                         seed: int, level: float = 0.95, corrected: bool = True,
                         substeps: int = DEFAULT_SUBSTEPS) -> list[ConfidenceInterval]:
    names, samples = parametric_bootstrap_samples(model, fit, noise, times, B, seed, corrected,
                                                  substeps)
    return percentile_intervals(samples, names, level, "parametric")


def nonparametric_bootstrap_samples(data: TimeSeriesData, model: ModelSpec, noise: NoiseModel,
                                    B: int, seed: int, plan: StagePlan | None = None,
                                    rule: str = "trapezoid", corrected: bool = True
                                    ) -> tuple[tuple[str, ...], np.ndarray]:
    """Residual resampling on each stage's regression.

    Centred residuals of every stage are drawn with replacement and added to
    that stage's fitted response.  Response parts that scale with an earlier
    stage's estimate are rescaled by the resampled estimate before the stage
    is re-solved on its original design.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    fit = fit_bcls(model, data, noise, plan, rule, corrected)
    plan = fit.plan
    base = fit.estimates
    adjust = []
    for stage in plan.stages:
        parts = [(p, c, v) for p, c, v in
                 response_components(stage, model, data, noise, rule, corrected) if p is not None]
        adjust.append(parts)
    names = model.parameter_names + model.estimated_ics
    out = np.full((B, len(names)), np.nan)
    for b, rng in enumerate(_seeds(seed, B)):
        responses = []
        for st, parts in zip(fit.stages, adjust):
            resid = st.residuals - st.residuals.mean()
            y = st.fitted + resid[rng.integers(0, resid.size, resid.size)]

            def response(priors, y=y, parts=parts):
                return y + sum((c * (priors[p] - base[p]) * v for p, c, v in parts), 0.0)

            responses.append(response)
        try:
            est = refit_stage_responses(model, fit, responses)
        except Exception:
            continue
        out[b] = [est[n] for n in names]
    return names, out


def nonparametric_bootstrap(data: TimeSeriesData, model: ModelSpec, noise: NoiseModel, B: int,
                            seed: int, plan: StagePlan | None = None, level: float = 0.95,
                            rule: str = "trapezoid", corrected: bool = True
                            ) -> list[ConfidenceInterval]:
    names, samples = nonparametric_bootstrap_samples(data, model, noise, B, seed, plan, rule,
                                                     corrected)
    return percentile_intervals(samples, names, level, "nonparametric")


def intervals_to_csv(intervals: Sequence[ConfidenceInterval]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["param", "lower", "upper", "kind", "level"])
    for ci in intervals:
        w.writerow([ci.param, repr(ci.lower), repr(ci.upper), ci.kind, repr(ci.level)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# consistency sweep


@dataclass(frozen=True)
class SweepRow:
    n: int
    param: str
    bias: float
    abs_bias: float
    mc_sd: float
    mc_se: float


def consistency_sweep(model: ModelSpec, truth: Mapping[str, float], noise: NoiseModel,
                      n_list: Sequence[int], R: int, seed: int,
                      t_range: tuple[float, float] = (0.0, 20.0), threads: int = 1,
                      rule: str = "trapezoid") -> list[SweepRow]:
    """BCLS bias and Monte Carlo spread at each sample size in ``n_list``."""
    n_list = [int(n) for n in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be increasing")
    rows = []
    for n in n_list:
        cfg = McConfig(model, truth, noise, (noise.sigmas,), ((t_range[0], t_range[1], n),), R,
                       ("BCLS",), base_seed=seed, rule=rule, name="sweep")
        summary = run_monte_carlo(cfg, threads)
        for r in summary.rows:
            rows.append(SweepRow(n, r.param, r.bias, abs(r.bias), r.mc_sd, r.mc_se))
    return rows


# --------------------------------------------------------------------------
# presets

LOGISTIC_TRUTH = {"a": 0.8, "b": 0.0015}
FN_TRUTHS = {
    "A": {"C": 3.0, "a": 0.34, "b": 0.2, "v0": -1.0, "r0": 1.0},
    "B": {"C": 3.0, "a": 0.58, "b": 0.58, "v0": -1.0, "r0": 1.0},
}
TABLE4_STARTS = {f"{a:g},{b:g}": {"a": a, "b": b}
                 for a in (0.4, 0.8, 1.2) for b in (0.4, 0.8)}


def _table2(sigma, n, reps, seed):
    model = builtin_model("logistic")
    return McConfig(model, LOGISTIC_TRUTH, NoiseModel.lognormal(0.0),
                    tuple((s,) for s in (sigma or (0.2, 0.4, 0.6, 0.8))),
                    tuple((0.0, 20.0, k) for k in (n or (21,))), reps or 1000,
                    ("BCLS", "LS", "NLS_bcls"), base_seed=seed, name="table2")


def _table3(truth):
    def make(sigma, n, reps, seed):
        return McConfig(builtin_model("fitzhugh_nagumo"), FN_TRUTHS[truth],
                        NoiseModel.gaussian(0.0, 0.0),
                        tuple((s, s) for s in (sigma or (0.05,))),
                        tuple((0.0, 20.0, k) for k in (n or (201,))), reps or 1000,
                        ("BCLS", "LS"), base_seed=seed, name=f"table3{truth}")
    return make


def _table4(truth):
    def make(sigma, n, reps, seed):
        return McConfig(builtin_model("fitzhugh_nagumo"), FN_TRUTHS[truth],
                        NoiseModel.gaussian(0.0, 0.0),
                        tuple((s, s) for s in (sigma or (0.05,))),
                        tuple((0.0, 20.0, k) for k in (n or (201,))), reps or 500,
                        ("NLS_bcls",), TABLE4_STARTS, nls_free=("a", "b"), nls_states=("R",),
                        base_seed=seed, name=f"table4{truth}")
    return make


SCENARIOS = {
    "table2": _table2,
    "table3": _table3("A"),
    "table3b": _table3("B"),
    "table4": _table4("A"),
    "table4b": _table4("B"),
}


def scenario(name: str, sigma: Sequence[float] | None = None, n: Sequence[int] | None = None,
             reps: int | None = None, seed: int = 0) -> McConfig:
    """Preset simulation settings; ``sigma``/``n``/``reps`` override the defaults.

    The ``b`` variants use the second FitzHugh-Nagumo truth (a = b = 0.58).
    """
    try:
        make = SCENARIOS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}") from None
    return make(tuple(sigma) if sigma else None, tuple(n) if n else None, reps, seed)
