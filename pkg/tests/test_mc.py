import csv
import io
import math

import numpy as np
import pytest

from odebcls.bcls import fit_bcls
from odebcls.expr import parse_expression
from odebcls.mc import (
    McConfig,
    consistency_sweep,
    intervals_to_csv,
    nonparametric_bootstrap,
    nonparametric_bootstrap_samples,
    parametric_bootstrap,
    percentile_intervals,
    run_monte_carlo,
    scenario,
)
from odebcls.model import ModelSpec, StateEquation, TermSpec, builtin_model
from odebcls.noise import NoiseModel
from odebcls.odesim import even_grid, simulate

LOGISTIC = {"a": 0.8, "b": 0.0015}


def logistic_config(**kw):
    args = dict(model=builtin_model("logistic"), truth=LOGISTIC, noise=NoiseModel.lognormal(0),
                sigma_levels=((0.2,),), grids=((0.0, 20.0, 21),), replicates=6,
                methods=("BCLS", "LS", "NLS_bcls"), base_seed=3)
    args.update(kw)
    return McConfig(**args)


def test_single_zero_noise_replicate():
    s = run_monte_carlo(logistic_config(sigma_levels=((0.0,),), replicates=1))
    data = simulate(builtin_model("logistic"), LOGISTIC, None, even_grid(0, 20, 21),
                    NoiseModel.lognormal(0), 3)
    fit = fit_bcls(builtin_model("logistic"), data, NoiseModel.lognormal(0))
    for p in ("a", "b"):
        row = s.row("BCLS", p)
        assert row.mean == fit.parameters[p]
        assert row.mc_sd == 0.0
        assert row.bias == pytest.approx(fit.parameters[p] - LOGISTIC[p])


def test_deterministic_across_workers():
    cfg = logistic_config()
    a = run_monte_carlo(cfg, threads=1)
    b = run_monte_carlo(cfg, threads=2)
    assert a.to_csv() == b.to_csv()
    for key in a.estimates:
        np.testing.assert_array_equal(a.estimates[key], b.estimates[key])


def test_seed_changes_results():
    a = run_monte_carlo(logistic_config(base_seed=1))
    b = run_monte_carlo(logistic_config(base_seed=2))
    assert a.row("BCLS", "a").mean != b.row("BCLS", "a").mean


def test_conditional_means_and_denominator():
    cfg = scenario("table4", reps=8, seed=5)
    s = run_monte_carlo(cfg)
    label = s.scenarios[0]
    for method in cfg.all_methods:
        conv = s.converged[(label, method)]
        est = s.estimates[(label, method)]
        row = s.row(method, "a")
        assert row.conv_rate == conv.sum() / 8
        if conv.any():
            assert row.mean == pytest.approx(est[conv, 0].mean())
        assert np.all(np.isnan(est[~conv]))


def test_failed_starts_do_not_abort():
    cfg = logistic_config(methods=("BCLS",), starts={"bad": {"a": 1.0, "b": -1.0}}, replicates=3)
    s = run_monte_carlo(cfg)
    row = s.row("NLS_start[bad]", "a")
    assert row.conv_rate == 0.0 and math.isnan(row.mean) and row.used == 0
    assert s.row("BCLS", "a").used == 3


def test_summary_csv_columns():
    s = run_monte_carlo(logistic_config(replicates=2))
    rows = list(csv.reader(io.StringIO(s.to_csv())))
    assert rows[0] == ["scenario", "method", "param", "mean", "mc_sd", "bias", "conv_rate"]
    assert {r[1] for r in rows[1:]} == {"BCLS", "LS", "NLS_bcls"}
    assert all(r[6] == "" for r in rows[1:] if r[1] != "NLS_bcls")


def test_config_validation():
    with pytest.raises(ValueError):
        logistic_config(replicates=0)
    with pytest.raises(ValueError):
        logistic_config(starts={"s": {"a": 1.0}})
    with pytest.raises(ValueError):
        logistic_config(methods=("PsLS",))
    with pytest.raises(ValueError):
        logistic_config(sigma_levels=((0.1, 0.2),))


def test_scenarios():
    cfg = scenario("table2", sigma=[0.4], n=[201], reps=5)
    assert cfg.sigma_levels == ((0.4,),) and cfg.grids == ((0.0, 20.0, 201),)
    assert scenario("table2").sigma_levels == ((0.2,), (0.4,), (0.6,), (0.8,))
    t4 = scenario("table4b")
    assert t4.truth["a"] == 0.58 and t4.nls_free == ("a", "b") and t4.nls_states == ("R",)
    assert len(t4.starts) == 6 and t4.replicates == 500
    with pytest.raises(KeyError):
        scenario("table9")


def test_percentile_two_resamples():
    x = np.array([[1.0, 5.0], [3.0, 2.0]])
    lo, hi = percentile_intervals(x, ["p", "q"])
    assert (lo.lower, lo.upper, hi.lower, hi.upper) == (1.0, 3.0, 2.0, 5.0)


def test_percentile_monotone_in_level():
    x = np.random.default_rng(0).normal(size=(300, 2))
    for c90, c95 in zip(percentile_intervals(x, "ab", 0.90), percentile_intervals(x, "ab", 0.95)):
        assert c95.lower <= c90.lower <= c90.upper <= c95.upper


def test_percentile_drops_failures():
    x = np.array([[1.0], [np.nan], [2.0]])
    (ci,) = percentile_intervals(x, ["p"])
    assert ci.replicates == 2
    with pytest.raises(ValueError):
        percentile_intervals(np.full((2, 1), np.nan), ["p"])


def test_parametric_zero_noise_degenerate():
    m = builtin_model("logistic")
    noise = NoiseModel.lognormal(0.0)
    data = simulate(m, LOGISTIC, None, even_grid(0, 20, 21), noise, 0)
    fit = fit_bcls(m, data, noise)
    for ci in parametric_bootstrap(m, fit, noise, data.times, 20, 1):
        assert ci.upper - ci.lower < 1e-6
        # centred on the estimate up to the refit's own quadrature bias on 21 points
        assert ci.lower == pytest.approx(fit.estimates[ci.param], rel=5e-3)


def _drift_model():
    eq = StateEquation(0, (TermSpec("k", parse_expression("1", ["X"])),))
    return ModelSpec(("X",), (eq,), (None,), name="drift")


def test_nonparametric_zero_residuals_degenerate():
    m = _drift_model()
    data = simulate(m, {"k": 0.7, "x0": 1.5}, {"x0": 1.5}, even_grid(0, 5, 11),
                    NoiseModel.gaussian(0.0), 0)
    intervals = nonparametric_bootstrap(data, m, NoiseModel.gaussian(0.0), 30, 2)
    assert {c.param for c in intervals} == {"k", "x0"}
    for ci in intervals:
        assert ci.upper - ci.lower < 1e-6


def test_nonparametric_two_resamples_are_extremes():
    m = builtin_model("fn")
    truth = {"C": 3.0, "a": 0.34, "b": 0.2, "v0": -1.0, "r0": 1.0}
    noise = NoiseModel.gaussian(0.05, 0.05)
    data = simulate(m, truth, truth, even_grid(0, 20, 201), noise, 1)
    names, samples = nonparametric_bootstrap_samples(data, m, noise, 2, 7)
    intervals = nonparametric_bootstrap(data, m, noise, 2, 7)
    for j, ci in enumerate(intervals):
        assert ci.param == names[j]
        assert ci.lower == samples[:, j].min() and ci.upper == samples[:, j].max()


def test_nonparametric_narrower_than_parametric():
    m = builtin_model("logistic")
    noise = NoiseModel.lognormal(0.23)
    data = simulate(m, LOGISTIC, None, even_grid(0, 20, 21), noise, 0)
    fit = fit_bcls(m, data, noise)
    par = {c.param: c.upper - c.lower for c in parametric_bootstrap(m, fit, noise, data.times, 300, 1)}
    npar = {c.param: c.upper - c.lower for c in nonparametric_bootstrap(data, m, noise, 300, 1)}
    assert npar["a"] < par["a"] and npar["b"] < par["b"]
    # same order of magnitude as the published parametric interval width for a (about 0.17)
    assert 0.05 < par["a"] < 0.5


def test_intervals_csv():
    x = np.array([[1.0], [2.0], [3.0]])
    text = intervals_to_csv(percentile_intervals(x, ["a"], 0.9, "nonparametric"))
    assert text.splitlines() == ["param,lower,upper,kind,level", "a,1.0,3.0,nonparametric,0.9"]


def test_sweep_single_n():
    rows = consistency_sweep(builtin_model("logistic"), LOGISTIC, NoiseModel.lognormal(0.4),
                             [21], 5, 0)
    assert {r.n for r in rows} == {21} and {r.param for r in rows} == {"a", "b"}


def test_sweep_zero_noise_bias_decreases():
    rows = consistency_sweep(builtin_model("logistic"), LOGISTIC, NoiseModel.lognormal(0.0),
                             [21, 201, 2001], 1, 0)
    for p in ("a", "b"):
        bias = [r.abs_bias for r in rows if r.param == p]
        assert bias[0] > bias[1] > bias[2]


def test_sweep_requires_increasing_n():
    with pytest.raises(ValueError):
        consistency_sweep(builtin_model("logistic"), LOGISTIC, NoiseModel.lognormal(0.4),
                          [201, 21], 2, 0)
