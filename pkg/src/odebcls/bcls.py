"""Bias-corrected least squares for parameters entering an ODE vector field linearly.

Each stage of a :class:`~odebcls.model.StagePlan` is a linear regression whose
covariates are cumulative integrals of (bias-corrected) basis functions
evaluated on the observed data.  Stages run in order and may use estimates
from earlier stages as coefficients in their response.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.linalg

from .data import TimeSeriesData
from .expr import Expr, evaluate_basis, to_text
from .model import EstimationStage, ModelSpec, Signal, StagePlan, validate_model
from .noise import CorrectedBasis, NoiseModel, correct_basis
from .quadrature import cumulative

__all__ = [
    "TimeSeriesData",
    "RankDeficient",
    "MalformedStage",
    "StageFailure",
    "StageDesign",
    "StageResult",
    "BclsFit",
    "build_stage_design",
    "solve_linear",
    "fit_bcls",
    "refit_stage_responses",
    "response_components",
    "estimating_function",
    "raw_coefficients",
    "RANK_TOLERANCE",
]

RANK_TOLERANCE = 1e-10


class RankDeficient(np.linalg.LinAlgError):
    """Design columns are (numerically) collinear; the stage is not identifiable."""


class MalformedStage(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, index: int, name: str, cause: Exception):
        self.index = index
        self.name = name
        self.cause = cause
        label = f"stage {index}" + (f" ({name})" if name else "")
        super().__init__(f"{label} failed: {cause}")


@dataclass(frozen=True, eq=False)
class StageDesign:
    response: np.ndarray
    design: np.ndarray
    labels: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class StageResult:
    index: int
    name: str
    estimates: dict[str, float]
    coefficients: np.ndarray  # raw regression coefficients, column order of ``design``
    labels: tuple[str, ...]
    response: np.ndarray
    design: np.ndarray
    residuals: np.ndarray
    residual_sd: float

    @property
    def fitted(self) -> np.ndarray:
        return self.response - self.residuals


@dataclass(frozen=True, eq=False)
class BclsFit:
    parameters: dict[str, float]
    initial_conditions: dict[str, float]
    stages: tuple[StageResult, ...]
    corrected: bool
    rule: str = "trapezoid"
    plan: StagePlan | None = field(default=None, repr=False)

    @property
    def estimates(self) -> dict[str, float]:
        return {**self.parameters, **self.initial_conditions}


@functools.lru_cache(maxsize=256)
def _corrected(expr: Expr, noise: NoiseModel, custom: Expr | None) -> CorrectedBasis:
    return correct_basis(expr, noise, custom)


def _signal_values(sig: Signal, model: ModelSpec, data: TimeSeriesData, noise: NoiseModel,
                   rule: str, corrected: bool) -> np.ndarray:
    t = data.times
    if sig.kind == "observation":
        y = data.values[:, sig.state]
        if model.transform_of(sig.state) == "log":
            if np.any(y <= 0):
                raise ValueError(
                    f"log-transformed state {model.state_names[sig.state]!r} has "
                    "non-positive observations"
                )
            return np.log(y)
        return y
    if sig.kind == "cumulative_integral":
        if corrected and sig.corrected:
            samples = _corrected(sig.expr, noise, sig.custom)(data.values)
        else:
            samples = evaluate_basis(sig.expr, data.values)
        samples = np.broadcast_to(samples, t.shape)
        return cumulative(samples, t, rule).values
    if sig.kind == "time":
        return t - t[0]
    if sig.kind == "one":
        return np.ones_like(t)
    raise MalformedStage(f"unknown signal kind {sig.kind!r}")


def _signal_label(sig: Signal, model: ModelSpec) -> str:
    if sig.kind == "observation":
        name = model.state_names[sig.state]
        return f"log {name}" if model.transform_of(sig.state) == "log" else name
    if sig.kind == "cumulative_integral":
        return f"int[{to_text(sig.expr)}]"
    return "t" if sig.kind == "time" else "1"


def build_stage_design(stage: EstimationStage, model: ModelSpec, data: TimeSeriesData,
                       noise: NoiseModel, priors: Mapping[str, float] | None = None,
                       rule: str = "trapezoid", corrected: bool = True) -> StageDesign:
    """Response vector, design matrix and column labels for one stage.

    Column ``j`` is ``sign_j`` times its signal; an intercept column of ones is
    appended last when the stage has one.
    """
    priors = priors or {}
    if not stage.covariates:
        raise MalformedStage("stage has no covariate terms")
    response = np.zeros(data.times.size)
    for term in stage.response:
        coef = term.coefficient
        if term.prior is not None:
            if term.prior not in priors:
                raise KeyError(f"missing prior estimate {term.prior!r}")
            coef *= priors[term.prior]
        response = response + coef * _signal_values(term.signal, model, data, noise, rule,
                                                    corrected)
    columns, labels = [], []
    for cov in stage.covariates:
        columns.append(cov.sign * _signal_values(cov.signal, model, data, noise, rule, corrected))
        labels.append(cov.target)
    if stage.intercept is not None:
        if stage.intercept.divide_by is not None and stage.intercept.divide_by not in priors:
            raise KeyError(f"missing prior estimate {stage.intercept.divide_by!r}")
        columns.append(np.ones_like(response))
        labels.append(stage.intercept.target)
    return StageDesign(response, np.column_stack(columns), tuple(labels))


def solve_linear(design, response) -> tuple[np.ndarray, np.ndarray]:
    """Least squares via column-pivoted Householder QR.

    Raises :class:`RankDeficient` when a pivot of ``R`` falls below
    ``RANK_TOLERANCE`` times the largest one.
    """
    Z = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    rows, cols = Z.shape
    if y.shape != (rows,):
        raise ValueError(f"response shape {y.shape} does not match design {Z.shape}")
    if rows < cols:
        raise RankDeficient(f"{rows} rows for {cols} columns")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(y))):
        raise ValueError("design or response has non-finite entries")
    Q, R, perm = scipy.linalg.qr(Z, mode="economic", pivoting=True)
    pivots = np.abs(np.diag(R))
    if pivots.size == 0 or pivots[0] == 0 or np.any(pivots < RANK_TOLERANCE * pivots[0]):
        raise RankDeficient("design matrix is rank deficient (collinear covariates; "
                            "is the system at equilibrium?)")
    beta = np.empty(cols)
    beta[perm] = scipy.linalg.solve_triangular(R, Q.T @ y)
    return beta, y - Z @ beta


def _finish_stage(index: int, stage: EstimationStage, design: StageDesign,
                  priors: Mapping[str, float]) -> StageResult:
    beta, resid = solve_linear(design.design, design.response)
    estimates = {}
    for j, cov in enumerate(stage.covariates):
        estimates[cov.target] = float(beta[j])
    if stage.intercept is not None:
        value = float(beta[-1])
        if stage.intercept.divide_by is not None:
            value /= priors[stage.intercept.divide_by]
        if stage.intercept.exponentiate:
            value = math.exp(value)
        estimates[stage.intercept.target] = value
    rows, cols = design.design.shape
    dof = rows - cols
    sd = math.sqrt(float(resid @ resid) / dof) if dof > 0 else float("nan")
    return StageResult(index, stage.name, estimates, beta, design.labels, design.response,
                       design.design, resid, sd)


def fit_bcls(model: ModelSpec, data: TimeSeriesData, noise: NoiseModel,
             plan: StagePlan | None = None, rule: str = "trapezoid",
             corrected: bool = True, check: bool = True) -> BclsFit:
    """Run every stage of ``plan`` (default: the model's plan) in order.

    With ``corrected=False`` basis functions are integrated without bias
    correction, giving the plain least squares estimator.
    """
    plan = plan if plan is not None else model.stage_plan()
    if check:
        diags = validate_model(model, plan)
        if diags:
            raise ValueError("invalid model or plan: " + ", ".join(map(str, diags)))
    if data.values.shape[1] != model.s:
        raise ValueError(f"data has {data.values.shape[1]} states, model has {model.s}")
    priors: dict[str, float] = {}
    results = []
    for i, stage in enumerate(plan.stages):
        try:
            design = build_stage_design(stage, model, data, noise, priors, rule, corrected)
            result = _finish_stage(i, stage, design, priors)
        except (ValueError, KeyError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise StageFailure(i, stage.name, exc) from exc
        priors.update(result.estimates)
        results.append(result)
    ics = set(model.estimated_ics)
    return BclsFit(
        parameters={k: priors[k] for k in model.parameter_names},
        initial_conditions={k: v for k, v in priors.items() if k in ics},
        stages=tuple(results),
        corrected=corrected,
        rule=rule,
        plan=plan,
    )


def refit_stage_responses(model: ModelSpec, fit: BclsFit, responses) -> dict[str, float]:
    """Re-solve each stage of ``fit`` on its fixed design with new response vectors.

    ``responses[i]`` is an array or a callable mapping the priors estimated so
    far to an array.  Intercept post-processing uses the re-estimated priors.
    Used by the residual bootstrap.
    """
    plan = fit.plan if fit.plan is not None else model.stage_plan()
    priors: dict[str, float] = {}
    for i, (stage, result) in enumerate(zip(plan.stages, fit.stages)):
        y = responses[i](priors) if callable(responses[i]) else responses[i]
        design = StageDesign(np.asarray(y, dtype=float), result.design, result.labels)
        priors.update(_finish_stage(i, stage, design, priors).estimates)
    return priors


def response_components(stage: EstimationStage, model: ModelSpec, data: TimeSeriesData,
                        noise: NoiseModel, rule: str = "trapezoid", corrected: bool = True
                        ) -> list[tuple[str | None, float, np.ndarray]]:
    """``(prior, coefficient, signal)`` for each response term of a stage.

    The stage response is ``sum(coefficient * priors[prior] * signal)``, with
    a missing prior read as 1.
    """
    return [(term.prior, term.coefficient,
             _signal_values(term.signal, model, data, noise, rule, corrected))
            for term in stage.response]


def raw_coefficients(stage: EstimationStage, values: Mapping[str, float]) -> np.ndarray:
    """Map target values (e.g. the truth) to a stage's raw coefficient vector."""
    beta = [float(values[c.target]) for c in stage.covariates]
    if stage.intercept is not None:
        v = float(values[stage.intercept.target])
        if stage.intercept.exponentiate:
            v = math.log(v)
        if stage.intercept.divide_by is not None:
            v *= float(values[stage.intercept.divide_by])
        beta.append(v)
    return np.array(beta)


def estimating_function(fit: BclsFit, stage_index: int, beta=None) -> np.ndarray:
    """``U_n(beta) = Z^T (y - Z beta) / n`` for one stage (default: at the fitted beta)."""
    st = fit.stages[stage_index]
    b = st.coefficients if beta is None else np.asarray(beta, dtype=float)
    Z = st.design
    return Z.T @ (st.response - Z @ b) / Z.shape[0]
