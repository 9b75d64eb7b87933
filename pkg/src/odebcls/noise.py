"""Observation noise models and bias-corrected basis functions.

For a basis ``h`` and noisy observations ``Y`` of states ``X`` the corrected
basis ``h*`` satisfies ``E[h*(Y)] = h(X)``.  Corrections are derived exactly
for polynomial bases:

* additive Gaussian noise: ``y^n`` is replaced by the moment-adjusted
  polynomial ``p_n(y)`` with ``p_0 = 1``, ``p_1 = y`` and
  ``p_n = y p_{n-1} - (n-1) sigma^2 p_{n-2}`` (scaled Hermite polynomials);
* log-normal noise (``log Y = log X + eps``): ``y^n`` is multiplied by
  ``exp(-n^2 sigma^2 / 2)``.

States are independent, so a monomial's correction is the product of its
per-state factors, and linearity carries the result over sums of monomials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np

from .data import TimeSeriesData
from .expr import (
    NON_POLYNOMIAL,
    Expr,
    Monomial,
    evaluate_basis,
    evaluate_polynomial,
    from_polynomial,
    polynomial_normal_form,
    state_indices,
)

__all__ = [
    "NoiseKind",
    "NoiseModel",
    "CorrectedBasis",
    "NonPolynomialUnderGaussianNoise",
    "UnsupportedLogNormalForm",
    "moment_polynomial",
    "correct_basis",
    "corrected_evaluate",
    "natural_spline_basis",
    "estimate_sigma",
    "noise_from_config",
]


class NoiseKind(str, Enum):
    GAUSSIAN = "gaussian"
    LOGNORMAL = "lognormal"


@dataclass(frozen=True)
class NoiseModel:
    """Independent per-state observation noise.

    For ``LOGNORMAL`` states ``sigma`` is the standard deviation of ``eps`` in
    ``log Y = log X + eps``.
    """

    kinds: tuple[NoiseKind, ...]
    sigmas: tuple[float, ...]

    def __post_init__(self):
        kinds = tuple(NoiseKind(k) for k in self.kinds)
        sigmas = tuple(float(s) for s in self.sigmas)
        if len(kinds) != len(sigmas):
            raise ValueError("one noise kind per sigma")
        if any(not math.isfinite(s) or s < 0 for s in sigmas):
            raise ValueError(f"sigmas must be finite and non-negative, got {sigmas}")
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "sigmas", sigmas)

    @classmethod
    def gaussian(cls, *sigmas: float) -> "NoiseModel":
        return cls((NoiseKind.GAUSSIAN,) * len(sigmas), sigmas)

    @classmethod
    def lognormal(cls, *sigmas: float) -> "NoiseModel":
        return cls((NoiseKind.LOGNORMAL,) * len(sigmas), sigmas)

    @property
    def s(self) -> int:
        return len(self.sigmas)

    def with_sigmas(self, sigmas: Sequence[float]) -> "NoiseModel":
        return NoiseModel(self.kinds, tuple(sigmas))

    def scaled(self, factor: float) -> "NoiseModel":
        return self.with_sigmas([factor * s for s in self.sigmas])


class NonPolynomialUnderGaussianNoise(ValueError):
    pass


class UnsupportedLogNormalForm(ValueError):
    pass


def moment_polynomial(n: int, sigma: float) -> np.ndarray:
    """Coefficients (ascending powers) of ``p_n`` with ``E[p_n(x + eps)] = x^n``."""
    prev = np.zeros(n + 1)
    prev[0] = 1.0
    if n == 0:
        return prev
    cur = np.zeros(n + 1)
    cur[1] = 1.0
    var = sigma * sigma
    for k in range(2, n + 1):
        nxt = np.zeros(n + 1)
        nxt[1:] = cur[:-1]
        nxt -= (k - 1) * var * prev
        prev, cur = cur, nxt
    return cur


@dataclass(frozen=True, eq=False)
class CorrectedBasis:
    """A basis function together with its bias-corrected evaluator.

    ``derivation`` is one of ``identity``, ``hermite-moment``,
    ``lognormal-moment``, ``mixed-moment`` or ``user-supplied``.
    """

    original: Expr
    derivation: str
    monomials: tuple[Monomial, ...] | None = None
    custom: Expr | None = None

    def __call__(self, obs):
        if self.derivation == "identity":
            return evaluate_basis(self.original, obs)
        if self.custom is not None:
            return evaluate_basis(self.custom, obs)
        return evaluate_polynomial(self.monomials, obs)

    def as_expr(self, state_names: Sequence[str]) -> Expr:
        if self.derivation == "identity":
            return self.original
        if self.custom is not None:
            return self.custom
        return from_polynomial(self.monomials, state_names)


def _factor(q: int, degree: int, s: int, kind: NoiseKind, sigma: float) -> dict:
    if kind is NoiseKind.LOGNORMAL:
        deg = [0] * s
        deg[q] = degree
        return {tuple(deg): math.exp(-0.5 * degree * degree * sigma * sigma)}
    out = {}
    for k, c in enumerate(moment_polynomial(degree, sigma)):
        if c != 0.0:
            deg = [0] * s
            deg[q] = k
            out[tuple(deg)] = c
    return out


def _mul(p: dict, q: dict) -> dict:
    out: dict = {}
    for d1, c1 in p.items():
        for d2, c2 in q.items():
            d = tuple(a + b for a, b in zip(d1, d2))
            out[d] = out.get(d, 0.0) + c1 * c2
    return out


def correct_basis(expr: Expr, noise: NoiseModel, custom: Expr | None = None) -> CorrectedBasis:
    """Derive ``h*`` for ``expr`` under ``noise`` (or wrap a user-supplied one)."""
    if custom is not None:
        return CorrectedBasis(expr, "user-supplied", custom=custom)
    touched = [q for q in sorted(state_indices(expr)) if noise.sigmas[q] > 0]
    if not touched:
        return CorrectedBasis(expr, "identity")
    s = noise.s
    poly = polynomial_normal_form(expr, s)
    if poly is NON_POLYNOMIAL:
        if any(noise.kinds[q] is NoiseKind.GAUSSIAN for q in touched):
            raise NonPolynomialUnderGaussianNoise(
                "automatic bias correction needs a polynomial basis under Gaussian noise; "
                "supply a custom correction"
            )
        raise UnsupportedLogNormalForm(
            "log-normal correction is only derived for polynomial bases; supply a custom correction"
        )
    total: dict = {}
    for m in poly:
        term = {(0,) * s: m.coefficient}
        for q, d in enumerate(m.degrees):
            if d:
                term = _mul(term, _factor(q, d, s, noise.kinds[q], noise.sigmas[q]))
        for d, c in term.items():
            total[d] = total.get(d, 0.0) + c
    kinds = {noise.kinds[q] for q in touched}
    if kinds == {NoiseKind.GAUSSIAN}:
        derivation = "hermite-moment"
    elif kinds == {NoiseKind.LOGNORMAL}:
        derivation = "lognormal-moment"
    else:
        derivation = "mixed-moment"
    monos = [Monomial(c, d) for d, c in total.items() if c != 0.0]
    monos.sort(key=lambda m: (sum(m.degrees), tuple(-d for d in m.degrees)))
    return CorrectedBasis(expr, derivation, tuple(monos))


def corrected_evaluate(cb: CorrectedBasis, obs) -> float | np.ndarray:
    return cb(obs)


# --------------------------------------------------------------------------
# residual standard deviation from a regression spline


def natural_spline_basis(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Natural cubic spline basis (truncated power form) including the constant.

    With ``K`` knots the basis has ``K`` columns: ``1``, ``x`` and ``K - 2``
    differences of truncated cubics that are linear beyond the boundary knots.
    """
    x = np.asarray(x, dtype=float)
    k = np.asarray(knots, dtype=float)
    K = k.size
    cols = [np.ones_like(x), x]

    def d(j):
        return (np.maximum(x - k[j], 0) ** 3 - np.maximum(x - k[-1], 0) ** 3) / (k[-1] - k[j])

    last = d(K - 2)
    for j in range(K - 2):
        cols.append(d(j) - last)
    return np.column_stack(cols)


def estimate_sigma(series, state=0, smoother_df: int = 3, log: bool = False,
                   times=None) -> float:
    """Residual SD around a least-squares natural cubic spline in time.

    ``series`` is a :class:`TimeSeriesData` (with ``state`` a name or index) or
    a plain vector paired with ``times``.  The spline has ``smoother_df``
    degrees of freedom beyond the intercept: ``smoother_df - 1`` interior knots
    at equally spaced quantiles of ``t`` plus the two boundary knots.  The
    estimate is ``sqrt(RSS / (n_obs - smoother_df - 1))``.
    """
    if isinstance(series, TimeSeriesData):
        t = series.times
        y = series.column(state)
    else:
        if times is None:
            raise ValueError("times are required with a plain vector")
        t = np.asarray(times, dtype=float)
        y = np.asarray(series, dtype=float)
    if smoother_df < 1:
        raise ValueError("smoother_df must be at least 1")
    n_obs = y.size
    if n_obs < smoother_df + 2:
        raise ValueError(f"need at least {smoother_df + 2} observations, got {n_obs}")
    if log:
        if np.any(y <= 0):
            raise ValueError("log-normal state has non-positive observations")
        y = np.log(y)
    interior = np.quantile(t, np.arange(1, smoother_df) / smoother_df)
    knots = np.concatenate([[t.min()], interior, [t.max()]])
    basis = natural_spline_basis(t, knots)
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    rss = float(np.sum((y - basis @ coef) ** 2))
    return math.sqrt(rss / (n_obs - smoother_df - 1))


# --------------------------------------------------------------------------
# configuration


def noise_from_config(section: Mapping[str, Any], state_names: Sequence[str],
                      data: TimeSeriesData | None = None,
                      default_kinds: Sequence[str] | None = None) -> NoiseModel:
    """Build a noise model from ``{"V": {"kind": "gaussian", "sigma": 0.05}, ...}``.

    ``"sigma": "estimate"`` (optional ``"df"``) fits a natural spline to
    ``data``; log-normal states are smoothed on the log scale.
    """
    problems = []
    kinds, sigmas = [], []
    for q, name in enumerate(state_names):
        entry = section.get(name)
        default = default_kinds[q] if default_kinds else "gaussian"
        if entry is None:
            kinds.append(default)
            sigmas.append(0.0)
            continue
        kind = entry.get("kind", default)
        if kind not in (k.value for k in NoiseKind):
            problems.append(f"noise/{name}/kind: unknown kind {kind!r}")
            kind = "gaussian"
        sigma = entry.get("sigma", 0.0)
        if sigma == "estimate":
            if data is None:
                problems.append(f"noise/{name}/sigma: 'estimate' needs data")
                sigma = 0.0
            else:
                sigma = estimate_sigma(data, name, int(entry.get("df", 3)),
                                       log=kind == NoiseKind.LOGNORMAL.value)
        elif not isinstance(sigma, (int, float)) or sigma < 0:
            problems.append(f"noise/{name}/sigma: expected non-negative number or 'estimate'")
            sigma = 0.0
        kinds.append(kind)
        sigmas.append(float(sigma))
    for name in section:
        if name not in state_names:
            problems.append(f"noise/{name}: unknown state")
    if problems:
        raise ValueError("invalid noise section:\n  " + "\n  ".join(problems))
    return NoiseModel(tuple(kinds), tuple(sigmas))
