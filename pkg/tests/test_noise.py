import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odebcls.data import TimeSeriesData
from odebcls.expr import evaluate_basis, parse_expression
from odebcls.model import builtin_model
from odebcls.noise import (
    NoiseModel,
    NonPolynomialUnderGaussianNoise,
    UnsupportedLogNormalForm,
    correct_basis,
    corrected_evaluate,
    estimate_sigma,
    moment_polynomial,
    noise_from_config,
)
from odebcls.odesim import even_grid, simulate

FN = ["V", "R"]


def test_lognormal_linear_factor():
    cb = correct_basis(parse_expression("X", ["X"]), NoiseModel.lognormal(0.23))
    assert cb.derivation == "lognormal-moment"
    assert corrected_evaluate(cb, np.array([100.0])) == pytest.approx(100 * math.exp(-0.23**2 / 2))
    assert corrected_evaluate(cb, np.array([100.0])) == pytest.approx(97.389, abs=1e-3)


def test_gaussian_cube():
    sigma = 0.4
    cb = correct_basis(parse_expression("Y^3", ["Y"]), NoiseModel.gaussian(sigma))
    assert cb.derivation == "hermite-moment"
    y = np.linspace(-2, 2, 7)[:, None]
    np.testing.assert_allclose(cb(y), y[:, 0] ** 3 - 3 * sigma**2 * y[:, 0])


def test_gaussian_cube_monte_carlo():
    x, sigma = 1.3, 0.4
    cb = correct_basis(parse_expression("Y^3", ["Y"]), NoiseModel.gaussian(sigma))
    draws = x + sigma * np.random.default_rng(11).standard_normal((10**6, 1))
    vals = cb(draws)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - 2.197) <= 3 * se


def test_fn_stage_one_correction():
    h = parse_expression("V - V^3/3 + R", FN)
    cb = correct_basis(h, NoiseModel.gaussian(0.1, 0.1))
    assert cb(np.array([1.0, 0.0])) == pytest.approx(1 - 0.97 / 3)
    assert cb(np.array([1.0, 0.0])) == pytest.approx(0.67667, abs=1e-5)


def test_zero_sigma_is_identity():
    h = parse_expression("V - V^3/3 + R*V^2", FN)
    cb = correct_basis(h, NoiseModel.gaussian(0.0, 0.0))
    assert cb.derivation == "identity"
    pts = np.random.default_rng(1).normal(size=(20, 2))
    np.testing.assert_array_equal(cb(pts), evaluate_basis(h, pts))


def test_untouched_noisy_state_is_identity():
    cb = correct_basis(parse_expression("R^2", FN), NoiseModel.gaussian(0.3, 0.0))
    assert cb.derivation == "identity"


@pytest.mark.parametrize("sigma", [0.0, 0.1, 0.7])
def test_hermite_low_orders(sigma):
    v = sigma**2
    np.testing.assert_allclose(moment_polynomial(2, sigma), [-v, 0, 1])
    np.testing.assert_allclose(moment_polynomial(4, sigma), [3 * v * v, 0, -6 * v, 0, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.floats(0.0, 1.0), st.floats(-2.0, 2.0))
def test_hermite_moment_identity(n, sigma, x):
    # E[p_n(x + eps)] via Gauss-Hermite quadrature equals x^n
    nodes, weights = np.polynomial.hermite_e.hermegauss(20)
    p = np.polynomial.polynomial.polyval(x + sigma * nodes, moment_polynomial(n, sigma))
    assert float(weights @ p) / math.sqrt(2 * math.pi) == pytest.approx(x**n, abs=1e-9, rel=1e-9)


def test_lognormal_moment_cancels():
    x, sigma, n = 1.7, 0.3, 3
    draws = x * np.exp(sigma * np.random.default_rng(5).standard_normal(10**6))
    raw = draws**n
    se = raw.std(ddof=1) / math.sqrt(raw.size)
    assert abs(raw.mean() - x**n * math.exp(n * n * sigma**2 / 2)) <= 4 * se
    cb = correct_basis(parse_expression("X^3", ["X"]), NoiseModel.lognormal(sigma))
    corr = cb(draws[:, None])
    assert abs(corr.mean() - x**n) <= 4 * corr.std(ddof=1) / math.sqrt(corr.size)


def test_mixed_noise_product():
    noise = NoiseModel(("gaussian", "lognormal"), (0.2, 0.1))
    cb = correct_basis(parse_expression("V^2*R", FN), noise)
    assert cb.derivation == "mixed-moment"
    v, r = 0.8, 1.5
    val = cb(np.array([v, r]))
    assert val == pytest.approx((v * v - 0.04) * r * math.exp(-0.005))


def test_non_polynomial_errors():
    with pytest.raises(NonPolynomialUnderGaussianNoise):
        correct_basis(parse_expression("1/V", FN), NoiseModel.gaussian(0.1, 0.1))
    with pytest.raises(UnsupportedLogNormalForm):
        correct_basis(parse_expression("1/V", FN), NoiseModel.lognormal(0.1, 0.1))


def test_custom_correction_wins():
    custom = parse_expression("2*V", FN)
    cb = correct_basis(parse_expression("1/V", FN), NoiseModel.gaussian(0.1, 0.1), custom)
    assert cb.derivation == "user-supplied"
    assert cb(np.array([3.0, 0.0])) == 6.0


def test_as_expr_round_trip():
    h = parse_expression("V - V^3/3 + R", FN)
    cb = correct_basis(h, NoiseModel.gaussian(0.2, 0.2))
    pts = np.random.default_rng(2).normal(size=(10, 2))
    np.testing.assert_allclose(evaluate_basis(cb.as_expr(FN), pts), cb(pts))


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel.gaussian(-0.1)
    with pytest.raises(ValueError):
        NoiseModel(("gaussian",), (0.1, 0.2))


def test_sigma_exact_on_linear_trend():
    t = np.linspace(0, 10, 30)
    assert estimate_sigma(3.0 - 0.5 * t, times=t, smoother_df=3) < 1e-8


def test_sigma_on_logistic_log_data():
    m = builtin_model("logistic")
    est = np.array([
        estimate_sigma(simulate(m, {"a": 0.8, "b": 0.0015}, None, even_grid(0, 20, 21),
                                NoiseModel.lognormal(0.23), seed), "X", 3, log=True)
        for seed in range(100)
    ])
    assert 0.15 <= est.mean() <= 0.31
    assert np.mean((est >= 0.15) & (est <= 0.31)) >= 0.9


def test_sigma_errors():
    t = np.arange(4.0)
    with pytest.raises(ValueError):
        estimate_sigma(t, times=t, smoother_df=3)
    with pytest.raises(ValueError):
        estimate_sigma(np.array([1, -1, 2, 3, 4, 5.0]), times=np.arange(6.0), log=True)


def test_noise_from_config():
    t = np.linspace(0, 1, 20)
    data = TimeSeriesData(t, np.column_stack([t, 1 + 0 * t]), ("V", "R"))
    nm = noise_from_config({"V": {"kind": "gaussian", "sigma": 0.05},
                            "R": {"sigma": "estimate", "df": 2}}, ("V", "R"), data)
    assert nm.sigmas[0] == 0.05 and nm.sigmas[1] < 1e-8
    with pytest.raises(ValueError) as info:
        noise_from_config({"V": {"kind": "poisson", "sigma": -1}, "Q": {}}, ("V", "R"))
    assert str(info.value).count("noise/") == 3
