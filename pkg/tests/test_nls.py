import numpy as np
import pytest

from odebcls.bcls import fit_bcls
from odebcls.model import builtin_model
from odebcls.nls import (
    NlsConfig,
    ResidualFunction,
    fit_nls,
    local_minima,
    sse_surface,
    weighted_sse,
)
from odebcls.noise import NoiseModel
from odebcls.odesim import even_grid, simulate

LOGISTIC = {"a": 0.8, "b": 0.0015}
FN_TRUTH = {"C": 3.0, "a": 0.34, "b": 0.2, "v0": -1.0, "r0": 1.0}


@pytest.fixture(scope="module")
def fn_clean():
    return simulate(builtin_model("fn"), FN_TRUTH, FN_TRUTH, even_grid(0, 20, 201),
                    NoiseModel.gaussian(0, 0), 0)


def test_sse_zero_at_truth(fn_clean):
    assert weighted_sse(builtin_model("fn"), FN_TRUTH, fn_clean, NoiseModel.gaussian(0, 0)) < 1e-8


def test_equal_sigma_scales_plain_sse(fn_clean):
    m = builtin_model("fn")
    off = {**FN_TRUTH, "a": 0.5}
    plain = weighted_sse(m, off, fn_clean, NoiseModel.gaussian(0, 0))
    assert weighted_sse(m, off, fn_clean, NoiseModel.gaussian(0.1, 0.1)) == pytest.approx(plain / 0.01)


def test_sse_state_subset(fn_clean):
    m = builtin_model("fn")
    off = {**FN_TRUTH, "a": 0.5}
    noise = NoiseModel.gaussian(0.1, 0.2)
    both = weighted_sse(m, off, fn_clean, noise)
    parts = weighted_sse(m, off, fn_clean, noise, ["V"]) + weighted_sse(m, off, fn_clean, noise, ["R"])
    assert both == pytest.approx(parts)


def test_sse_blow_up_is_infinite():
    data = simulate(builtin_model("logistic"), LOGISTIC, None, even_grid(0, 20, 21),
                    NoiseModel.lognormal(0.1), 0)
    assert weighted_sse(builtin_model("logistic"), {"a": 1.0, "b": -1.0}, data,
                        NoiseModel.lognormal(0.1)) == np.inf


def test_logistic_from_bcls():
    m = builtin_model("logistic")
    noise = NoiseModel.lognormal(0.2)
    est = []
    for seed in range(200):
        data = simulate(m, LOGISTIC, None, even_grid(0, 20, 21), noise, seed)
        start = fit_bcls(m, data, noise).parameters
        fit = fit_nls(m, data, noise, NlsConfig(start))
        assert fit.converged
        est.append([fit.estimates["a"], fit.estimates["b"]])
    a, b = np.mean(est, axis=0)
    assert abs(a - 0.801) < 0.006
    assert abs(b - 0.00151) < 0.00003


def _fd_gradient(m, values, free, data, noise, states=None):
    g = []
    for p in free:
        h = 1e-5 * max(abs(values[p]), 1e-3)
        up = weighted_sse(m, {**values, p: values[p] + h}, data, noise, states)
        dn = weighted_sse(m, {**values, p: values[p] - h}, data, noise, states)
        g.append((up - dn) / (2 * h))
    return np.array(g)


def test_converged_fit_is_stationary():
    m = builtin_model("fn")
    noise = NoiseModel.gaussian(0.05, 0.05)
    data = simulate(m, FN_TRUTH, FN_TRUTH, even_grid(0, 20, 201), noise, 3)
    start = fit_bcls(m, data, noise).estimates
    fit = fit_nls(m, data, noise, NlsConfig(start))
    assert fit.converged
    g = _fd_gradient(m, fit.estimates, list(start), data, noise)
    assert np.linalg.norm(g) < 1e-4 * (1 + fit.sse)
    assert fit.sse == pytest.approx(weighted_sse(m, fit.estimates, data, noise))


def test_forward_jacobian_matches_central():
    m = builtin_model("logistic")
    noise = NoiseModel.lognormal(0.2)
    data = simulate(m, LOGISTIC, None, even_grid(0, 20, 21), noise, 1)
    res = ResidualFunction(m, data, noise, ("a", "b"), {"x0": 2.0})
    rng = np.random.default_rng(0)
    for _ in range(10):
        theta = np.array([rng.uniform(0.5, 1.1), rng.uniform(0.001, 0.002)])
        r0 = res(theta)
        fwd = res.jacobian(theta, r0, 1e-6)
        cen = np.empty_like(fwd)
        for j in range(2):
            h = 1e-5 * theta[j]
            e = np.zeros(2)
            e[j] = h
            cen[:, j] = (res(theta + e) - res(theta - e)) / (2 * h)
        scale = np.abs(cen).max(axis=0)
        assert np.max(np.abs(fwd - cen) / scale) < 1e-3


def test_divergent_start_is_reported():
    m = builtin_model("logistic")
    noise = NoiseModel.lognormal(0.1)
    data = simulate(m, LOGISTIC, None, even_grid(0, 20, 21), noise, 0)
    fit = fit_nls(m, data, noise, NlsConfig({"a": 1.0, "b": -1.0}))
    assert not fit.converged and fit.reason == "diverged"


def test_max_iterations():
    m = builtin_model("fn")
    noise = NoiseModel.gaussian(0.05, 0.05)
    data = simulate(m, FN_TRUTH, FN_TRUTH, even_grid(0, 20, 201), noise, 2)
    fit = fit_nls(m, data, noise, NlsConfig({"a": 1.2, "b": 0.8}, FN_TRUTH, ("R",), max_iter=1))
    assert not fit.converged and fit.reason == "max_iter" and fit.iterations == 1


def test_config_validation():
    with pytest.raises(ValueError):
        NlsConfig({"a": 1.0}, rtol=0)
    with pytest.raises(ValueError):
        NlsConfig({"a": 1.0}, max_iter=0)
    m = builtin_model("logistic")
    data = simulate(m, LOGISTIC, None, even_grid(0, 20, 21), NoiseModel.lognormal(0), 0)
    with pytest.raises(KeyError):
        fit_nls(m, data, NoiseModel.lognormal(0), NlsConfig({"c": 1.0}))


def test_single_cell_surface(fn_clean):
    m = builtin_model("fn")
    noise = NoiseModel.gaussian(0.05, 0.05)
    grid = sse_surface(m, fn_clean, noise, ("a", 0.5, 0.5, 1), ("b", 0.3, 0.3, 1), FN_TRUTH)
    assert grid.sse.shape == (1, 1)
    assert grid.sse[0, 0] == pytest.approx(
        weighted_sse(m, {**FN_TRUTH, "a": 0.5, "b": 0.3}, fn_clean, noise))


def test_surface_csv_and_minima(fn_clean):
    m = builtin_model("fn")
    grid = sse_surface(m, fn_clean, NoiseModel.gaussian(0, 0), ("a", 0.3, 2.2, 12),
                       ("b", 0.0, 3.0, 10), FN_TRUTH, ("R",))
    lines = grid.to_csv().splitlines()
    assert lines[0] == "a,b,sse" and len(lines) == 121
    # rows follow the first axis
    assert lines[1].startswith("0.3,0.0,") and lines[10].startswith("0.3,3.0,")
    assert not lines[11].startswith("0.3,")
    s = grid.sse
    for u, v, val in local_minima(grid):
        i = int(np.argmin(np.abs(grid.values1 - u)))
        j = int(np.argmin(np.abs(grid.values2 - v)))
        assert val <= s[i - 1:i + 2, j - 1:j + 2].min()


def test_degenerate_grid(fn_clean):
    with pytest.raises(ValueError):
        sse_surface(builtin_model("fn"), fn_clean, NoiseModel.gaussian(0, 0),
                    ("a", 1.0, 0.5, 3), ("b", 0, 1, 3), FN_TRUTH)
