"""ODE systems that are linear in their parameters, plus estimation stage plans.

A :class:`ModelSpec` describes ``dX_q/dt = sum_k coef_{q,k} * h_{q,k}(X)``
where each coefficient is ``sign * param [/ divisor]``.  The optional divisor
lets systems such as FitzHugh-Nagumo (``dR/dt = -(V - a + bR)/C``) be written
down for simulation even though the regression plan, not the vector field,
decides which quantities enter linearly.

A :class:`StagePlan` turns integral equations into a sequence of linear
regressions.  Each stage has a response built from signals (observations,
cumulative integrals of basis functions, elapsed time, constants) and
covariate columns, one per estimated target.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import jsonschema

from .expr import (
    NON_POLYNOMIAL,
    BinOp,
    Expr,
    ExpressionSyntaxError,
    Monomial,
    Neg,
    Pow,
    Var,
    from_polynomial,
    parse_expression,
    polynomial_normal_form,
)

__all__ = [
    "TermSpec",
    "StateEquation",
    "ModelSpec",
    "Signal",
    "ResponseTerm",
    "CovariateTerm",
    "Intercept",
    "EstimationStage",
    "StagePlan",
    "Diagnostic",
    "ModelFileError",
    "ic_name",
    "default_plan",
    "fitzhugh_nagumo_plan",
    "builtin_model",
    "validate_model",
    "validate_plan",
    "model_from_dict",
    "load_model",
    "BUILTIN_MODELS",
]

TRANSFORMS = ("none", "log")
SIGNAL_KINDS = ("observation", "cumulative_integral", "time", "one")


def ic_name(state_name: str) -> str:
    """Target name used for an estimated initial condition (``V`` -> ``v0``)."""
    return f"{state_name.lower()}0"


@dataclass(frozen=True)
class TermSpec:
    param: str | None
    basis: Expr
    sign: int = 1
    divide_by: str | None = None
    correction: Expr | None = None  # user-supplied h*; overrides automatic derivation


@dataclass(frozen=True)
class StateEquation:
    state: int
    terms: tuple[TermSpec, ...]
    transform: str = "none"


@dataclass(frozen=True)
class Signal:
    """One time series entering a regression.

    ``observation`` reads the (transformed) data of ``state``;
    ``cumulative_integral`` integrates ``expr`` evaluated on the data, through
    its bias correction when ``corrected`` is set; ``time`` is elapsed time
    ``t_i - t_0``; ``one`` is the constant 1.
    """

    kind: str
    state: int | None = None
    expr: Expr | None = None
    corrected: bool = True
    custom: Expr | None = None


@dataclass(frozen=True)
class ResponseTerm:
    signal: Signal
    coefficient: float = 1.0
    prior: str | None = None  # multiply by an estimate from an earlier stage


@dataclass(frozen=True)
class CovariateTerm:
    target: str
    signal: Signal
    sign: int = 1


@dataclass(frozen=True)
class Intercept:
    target: str
    divide_by: str | None = None
    exponentiate: bool = False  # intercept estimates log(x0) on a log-transformed equation


@dataclass(frozen=True)
class EstimationStage:
    response: tuple[ResponseTerm, ...]
    covariates: tuple[CovariateTerm, ...]
    intercept: Intercept | None = None
    name: str = ""

    @property
    def targets(self) -> tuple[str, ...]:
        names = tuple(c.target for c in self.covariates)
        if self.intercept is not None:
            names += (self.intercept.target,)
        return names

    @property
    def priors(self) -> tuple[str, ...]:
        refs = [r.prior for r in self.response if r.prior is not None]
        if self.intercept is not None and self.intercept.divide_by is not None:
            refs.append(self.intercept.divide_by)
        return tuple(refs)


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[EstimationStage, ...]

    @property
    def targets(self) -> tuple[str, ...]:
        return tuple(t for stage in self.stages for t in stage.targets)


@dataclass(frozen=True)
class ModelSpec:
    state_names: tuple[str, ...]
    equations: tuple[StateEquation, ...]
    initial_conditions: tuple[float | None, ...]  # None means estimated
    plan: StagePlan | None = None  # None: derive with default_plan
    name: str = ""

    @property
    def s(self) -> int:
        return len(self.state_names)

    @property
    def parameter_names(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for eq in self.equations:
            for term in eq.terms:
                for name in (term.param, term.divide_by):
                    if name is not None:
                        seen.setdefault(name, None)
        return tuple(seen)

    @property
    def ic_names(self) -> tuple[str, ...]:
        return tuple(ic_name(n) for n in self.state_names)

    @property
    def estimated_ics(self) -> tuple[str, ...]:
        return tuple(
            ic_name(n) for n, v in zip(self.state_names, self.initial_conditions) if v is None
        )

    @property
    def targets(self) -> tuple[str, ...]:
        return self.parameter_names + self.estimated_ics

    def equation_for(self, state: int) -> StateEquation:
        for eq in self.equations:
            if eq.state == state:
                return eq
        raise KeyError(self.state_names[state])

    def transform_of(self, state: int) -> str:
        try:
            return self.equation_for(state).transform
        except KeyError:
            return "none"

    def state_index(self, name: str) -> int:
        try:
            return self.state_names.index(name)
        except ValueError:
            raise KeyError(f"unknown state {name!r}") from None

    def stage_plan(self) -> StagePlan:
        return self.plan if self.plan is not None else default_plan(self)

    def with_initial_conditions(self, values: Mapping[str, float | None]) -> "ModelSpec":
        """Copy with some initial conditions replaced (keys are state names)."""
        ics = list(self.initial_conditions)
        for state, v in values.items():
            ics[self.state_index(state)] = v
        return ModelSpec(self.state_names, self.equations, tuple(ics), self.plan, self.name)


# --------------------------------------------------------------------------
# plans


def _divide_by_state(expr: Expr, q: int, state_names: Sequence[str]) -> Expr:
    poly = polynomial_normal_form(expr, len(state_names))
    if poly is not NON_POLYNOMIAL and all(m.degrees[q] >= 1 for m in poly):
        reduced = []
        for m in poly:
            deg = list(m.degrees)
            deg[q] -= 1
            reduced.append(Monomial(m.coefficient, tuple(deg)))
        return from_polynomial(reduced, state_names)
    return BinOp("/", expr, Var(q, state_names[q]))


def default_plan(model: ModelSpec) -> StagePlan:
    """One regression per equation, following the integral form of each equation.

    Known initial conditions move into the response; estimated ones become an
    intercept.  A log-transformed equation integrates ``h / X_q``.  Terms whose
    coefficient is divided by a parameter cannot be handled generically and
    need an explicit plan.
    """
    stages = []
    for eq in model.equations:
        q = eq.state
        name = model.state_names[q]
        response = [ResponseTerm(Signal("observation", state=q))]
        covariates = []
        for term in eq.terms:
            if term.divide_by is not None:
                raise ValueError(
                    f"term {term.param!r} in equation {name!r} is divided by "
                    f"{term.divide_by!r}; supply an explicit stage plan"
                )
            basis = term.basis
            correction = term.correction
            if eq.transform == "log":
                basis = _divide_by_state(basis, q, model.state_names)
                if correction is not None:
                    correction = BinOp("/", correction, Var(q, name))
            poly = polynomial_normal_form(basis, model.s)
            unit = (poly is not NON_POLYNOMIAL and len(poly) == 1
                    and poly[0].coefficient == 1.0 and not any(poly[0].degrees))
            if unit:
                signal = Signal("time")
            else:
                signal = Signal("cumulative_integral", expr=basis, custom=correction)
            if term.param is None:
                response.append(ResponseTerm(signal, coefficient=-term.sign))
            else:
                covariates.append(CovariateTerm(term.param, signal, term.sign))
        x0 = model.initial_conditions[q]
        intercept = None
        if x0 is None:
            intercept = Intercept(ic_name(name), exponentiate=eq.transform == "log")
        else:
            offset = math.log(x0) if eq.transform == "log" else x0
            response.append(ResponseTerm(Signal("one"), coefficient=-offset))
        stages.append(EstimationStage(tuple(response), tuple(covariates), intercept, name=name))
    return StagePlan(tuple(stages))


# --------------------------------------------------------------------------
# built-in systems


def _logistic() -> ModelSpec:
    names = ("X",)
    eq = StateEquation(
        0,
        (
            TermSpec("a", parse_expression("X", names), 1),
            TermSpec("b", parse_expression("X^2", names), -1),
        ),
        transform="log",
    )
    return ModelSpec(names, (eq,), (2.0,), name="logistic")


def fitzhugh_nagumo_plan(names: Sequence[str] = ("V", "R")) -> StagePlan:
    """Two-stage plan: ``C`` and ``v0`` from V, then ``a``, ``b``, ``r0`` from R.

    Stage two regresses ``C_hat * R(t) + int V`` on elapsed time and ``-int R``;
    its intercept estimates ``C * r0`` and is divided by ``C_hat``.
    """
    V, R = Var(0, names[0]), Var(1, names[1])
    h11 = parse_expression(f"{names[0]} - {names[0]}^3/3 + {names[1]}", names)
    stage1 = EstimationStage(
        response=(ResponseTerm(Signal("observation", state=0)),),
        covariates=(CovariateTerm("C", Signal("cumulative_integral", expr=h11)),),
        intercept=Intercept(ic_name(names[0])),
        name="voltage",
    )
    stage2 = EstimationStage(
        response=(
            ResponseTerm(Signal("observation", state=1), prior="C"),
            ResponseTerm(Signal("cumulative_integral", expr=V)),
        ),
        covariates=(
            CovariateTerm("a", Signal("time"), 1),
            CovariateTerm("b", Signal("cumulative_integral", expr=R), -1),
        ),
        intercept=Intercept(ic_name(names[1]), divide_by="C"),
        name="recovery",
    )
    return StagePlan((stage1, stage2))


def _fitzhugh_nagumo() -> ModelSpec:
    names = ("V", "R")

    def p(text: str) -> Expr:
        return parse_expression(text, names)

    eq_v = StateEquation(0, (TermSpec("C", p("V - V^3/3 + R"), 1),))
    eq_r = StateEquation(
        1,
        (
            TermSpec(None, p("V"), -1, divide_by="C"),
            TermSpec("a", p("1"), 1, divide_by="C"),
            TermSpec("b", p("R"), -1, divide_by="C"),
        ),
    )
    return ModelSpec(
        names, (eq_v, eq_r), (None, None), plan=fitzhugh_nagumo_plan(names),
        name="fitzhugh_nagumo",
    )


BUILTIN_MODELS = {"logistic": _logistic, "fitzhugh_nagumo": _fitzhugh_nagumo}
_ALIASES = {"fn": "fitzhugh_nagumo", "fhn": "fitzhugh_nagumo"}


def builtin_model(name: str) -> ModelSpec:
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in BUILTIN_MODELS:
        raise KeyError(f"unknown built-in model {name!r}; choose from {sorted(BUILTIN_MODELS)}")
    return BUILTIN_MODELS[key]()


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Diagnostic:
    code: str
    subject: str = ""

    def __str__(self) -> str:
        return f"{self.code}({self.subject})" if self.subject else self.code


def _expr_problems(expr: Expr, s: int) -> list[Diagnostic]:
    out = []
    stack = [expr]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            if not 0 <= node.index < s:
                out.append(Diagnostic("StateIndexOutOfRange", node.name))
        elif isinstance(node, Pow):
            if node.exponent < 0 or int(node.exponent) != node.exponent:
                out.append(Diagnostic("BadExponent", str(node.exponent)))
            stack.append(node.base)
        elif isinstance(node, Neg):
            stack.append(node.operand)
        elif isinstance(node, BinOp):
            stack.extend((node.left, node.right))
    return out


def _signal_problems(sig: Signal, s: int) -> list[Diagnostic]:
    if sig.kind not in SIGNAL_KINDS:
        return [Diagnostic("UnknownSignalKind", sig.kind)]
    if sig.kind == "observation" and (sig.state is None or not 0 <= sig.state < s):
        return [Diagnostic("StateIndexOutOfRange", str(sig.state))]
    if sig.kind == "cumulative_integral":
        if sig.expr is None:
            return [Diagnostic("MissingExpression")]
        probs = _expr_problems(sig.expr, s)
        if sig.custom is not None:
            probs += _expr_problems(sig.custom, s)
        return probs
    return []


def validate_plan(model: ModelSpec, plan: StagePlan) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    estimated: set[str] = set()
    seen: set[str] = set()
    expected = set(model.targets)
    for i, stage in enumerate(plan.stages):
        if not stage.covariates:
            diags.append(Diagnostic("MalformedStage", str(i)))
        if not stage.response:
            diags.append(Diagnostic("EmptyResponse", str(i)))
        for ref in stage.priors:
            if ref not in estimated:
                diags.append(Diagnostic("PriorNotEstimated", ref))
        for r in stage.response:
            diags += _signal_problems(r.signal, model.s)
        for c in stage.covariates:
            diags += _signal_problems(c.signal, model.s)
            if c.sign not in (1, -1):
                diags.append(Diagnostic("BadSign", c.target))
        for t in stage.targets:
            if t in seen:
                diags.append(Diagnostic("DuplicateTarget", t))
            elif t not in expected:
                diags.append(Diagnostic("UnknownTarget", t))
            seen.add(t)
        estimated.update(stage.targets)
    for t in model.targets:
        if t not in seen:
            diags.append(Diagnostic("MissingTarget", t))
    return diags


def validate_model(model: ModelSpec, plan: StagePlan | None = None) -> list[Diagnostic]:
    """Check structural invariants; an empty list means the model is usable."""
    if not model.equations:
        return [Diagnostic("NoEquations")]
    diags: list[Diagnostic] = []
    s = model.s
    if len(model.initial_conditions) != s:
        diags.append(Diagnostic("InitialConditionCount", str(len(model.initial_conditions))))
    states_seen: set[int] = set()
    for eq in model.equations:
        label = model.state_names[eq.state] if 0 <= eq.state < s else str(eq.state)
        if not 0 <= eq.state < s:
            diags.append(Diagnostic("StateIndexOutOfRange", label))
        elif eq.state in states_seen:
            diags.append(Diagnostic("DuplicateEquation", label))
        states_seen.add(eq.state)
        if eq.transform not in TRANSFORMS:
            diags.append(Diagnostic("UnknownTransform", eq.transform))
        if not eq.terms:
            diags.append(Diagnostic("EmptyEquation", label))
        params_here: set[str] = set()
        for term in eq.terms:
            if term.param is not None:
                if term.param in params_here:
                    diags.append(Diagnostic("DuplicateParameter", term.param))
                params_here.add(term.param)
            if term.sign not in (1, -1):
                diags.append(Diagnostic("BadSign", str(term.param)))
            diags += _expr_problems(term.basis, s)
            if term.correction is not None:
                diags += _expr_problems(term.correction, s)
    for name in sorted(set(model.parameter_names) & set(model.ic_names)):
        diags.append(Diagnostic("NameCollision", name))
    if len(set(model.state_names)) != s:
        diags.append(Diagnostic("DuplicateStateName"))
    if diags:
        return diags
    if plan is None:
        try:
            plan = model.stage_plan()
        except ValueError as exc:
            return [Diagnostic("NoStagePlan", str(exc))]
    return validate_plan(model, plan)


# --------------------------------------------------------------------------
# JSON model files

_SIGNAL_PROPERTIES = {
    "kind": {"enum": list(SIGNAL_KINDS) + ["integral"]},
    "state": {"type": "string"},
    "expr": {"type": "string"},
    "corrected": {"type": "boolean"},
    "correction": {"type": "string"},
}

MODEL_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["states", "equations"],
    "properties": {
        "name": {"type": "string"},
        "states": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "equations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["state", "terms"],
                "properties": {
                    "state": {"type": "string"},
                    "transform": {"enum": list(TRANSFORMS)},
                    "terms": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["expr"],
                            "properties": {
                                "param": {"type": ["string", "null"]},
                                "expr": {"type": "string"},
                                "sign": {"enum": [1, -1]},
                                "divide_by": {"type": ["string", "null"]},
                                "correction": {"type": ["string", "null"]},
                            },
                        },
                    },
                },
            },
        },
        "initial_conditions": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "properties": {"known": {"type": "number"}, "estimated": {"type": "boolean"}},
            },
        },
        "stages": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["response", "covariates"],
                "properties": {
                    "name": {"type": "string"},
                    "response": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["kind"],
                            "properties": {
                                **_SIGNAL_PROPERTIES,
                                "coefficient": {"type": "number"},
                                "prior": {"type": "string"},
                            },
                        },
                    },
                    "covariates": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["kind", "target"],
                            "properties": {
                                **_SIGNAL_PROPERTIES,
                                "target": {"type": "string"},
                                "sign": {"enum": [1, -1]},
                            },
                        },
                    },
                    "intercept": {
                        "type": ["object", "null"],
                        "required": ["target"],
                        "properties": {
                            "target": {"type": "string"},
                            "divide_by": {"type": ["string", "null"]},
                            "exponentiate": {"type": "boolean"},
                        },
                    },
                },
            },
        },
        "noise": {"type": "object"},
    },
}


class ModelFileError(ValueError):
    """A model definition could not be loaded; ``problems`` lists every issue found."""

    def __init__(self, problems: Sequence[str], source: str = ""):
        self.problems = list(problems)
        head = f"invalid model definition{f' in {source}' if source else ''}"
        super().__init__(head + ":\n  " + "\n  ".join(self.problems))


def model_from_dict(doc: Mapping[str, Any], source: str = "") -> ModelSpec:
    """Build a :class:`ModelSpec` from the JSON document layout.

    Every schema or expression problem is collected before raising
    :class:`ModelFileError`.
    """
    validator = jsonschema.Draft7Validator(MODEL_SCHEMA)
    problems = [
        f"{'/'.join(str(p) for p in err.absolute_path) or '<root>'}: {err.message}"
        for err in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.path)))
    ]
    if problems:
        raise ModelFileError(problems, source)

    names = tuple(doc["states"])

    def expr(text: str, where: str) -> Expr | None:
        try:
            return parse_expression(text, names)
        except ExpressionSyntaxError as exc:
            problems.append(f"{where}: {exc}")
            return None

    def state(name: str, where: str) -> int | None:
        if name not in names:
            problems.append(f"{where}: unknown state {name!r}")
            return None
        return names.index(name)

    equations = []
    for i, e in enumerate(doc["equations"]):
        q = state(e["state"], f"equations/{i}/state")
        terms = []
        for j, t in enumerate(e["terms"]):
            where = f"equations/{i}/terms/{j}"
            basis = expr(t["expr"], where + "/expr")
            corr = t.get("correction")
            corr_expr = expr(corr, where + "/correction") if corr else None
            terms.append(TermSpec(t.get("param"), basis, t.get("sign", 1), t.get("divide_by"),
                                  corr_expr))
        equations.append(StateEquation(q if q is not None else -1, tuple(terms),
                                       e.get("transform", "none")))

    ics: list[float | None] = [None] * len(names)
    for k, v in doc.get("initial_conditions", {}).items():
        q = state(k, f"initial_conditions/{k}")
        if q is None:
            continue
        if "known" in v:
            ics[q] = float(v["known"])
        elif not v.get("estimated", False):
            problems.append(f"initial_conditions/{k}: give 'known' or 'estimated': true")

    def signal(d: Mapping[str, Any], where: str) -> Signal:
        kind = "cumulative_integral" if d["kind"] == "integral" else d["kind"]
        q = None
        if kind == "observation":
            if "state" not in d:
                problems.append(f"{where}: observation needs 'state'")
            else:
                q = state(d["state"], where + "/state")
        ex = None
        if kind == "cumulative_integral":
            if "expr" not in d:
                problems.append(f"{where}: cumulative_integral needs 'expr'")
            else:
                ex = expr(d["expr"], where + "/expr")
        custom = expr(d["correction"], where + "/correction") if d.get("correction") else None
        return Signal(kind, q, ex, d.get("corrected", True), custom)

    plan = None
    if "stages" in doc:
        stages = []
        for i, st in enumerate(doc["stages"]):
            where = f"stages/{i}"
            response = tuple(
                ResponseTerm(signal(r, f"{where}/response/{j}"), float(r.get("coefficient", 1.0)),
                             r.get("prior"))
                for j, r in enumerate(st["response"])
            )
            covariates = tuple(
                CovariateTerm(c["target"], signal(c, f"{where}/covariates/{j}"), c.get("sign", 1))
                for j, c in enumerate(st["covariates"])
            )
            ic = st.get("intercept")
            intercept = None if ic is None else Intercept(
                ic["target"], ic.get("divide_by"), ic.get("exponentiate", False))
            stages.append(EstimationStage(response, covariates, intercept, st.get("name", "")))
        plan = StagePlan(tuple(stages))

    if problems:
        raise ModelFileError(problems, source)
    model = ModelSpec(names, tuple(equations), tuple(ics), plan, doc.get("name", ""))
    diags = validate_model(model)
    if diags:
        raise ModelFileError([str(d) for d in diags], source)
    return model


def load_model(path: str | Path) -> tuple[ModelSpec, dict]:
    """Read a model file; returns the model and the raw document (for the noise section)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFileError([f"line {exc.lineno} column {exc.colno}: {exc.msg}"], str(path))
    return model_from_dict(doc, str(path)), doc
