import numpy as np
import pytest
from scipy import stats

from odebcls.data import DataFileError, TimeSeriesData, read_csv, write_csv
from odebcls.model import builtin_model
from odebcls.noise import NoiseModel
from odebcls.odesim import (
    NonFiniteState,
    compile_model,
    even_grid,
    initial_state,
    logistic_closed_form,
    simulate,
    simulate_data,
    solve_ode,
)

LOGISTIC = {"a": 0.8, "b": 0.0015}
FN_TRUTH = {"C": 3.0, "a": 0.34, "b": 0.2, "v0": -1.0, "r0": 1.0}


def test_logistic_matches_closed_form():
    t = even_grid(0, 20, 21)
    traj = solve_ode(builtin_model("logistic"), LOGISTIC, None, t, substeps=10)
    exact = logistic_closed_form(0.8, 0.0015, 2.0, t)
    assert np.max(np.abs(traj.states[:, 0] / exact - 1)) < 1e-6
    np.testing.assert_array_equal(traj.times, t)


def test_rk4_fourth_order():
    t = even_grid(0, 20, 21)
    exact = logistic_closed_form(0.8, 0.0015, 2.0, t)
    m = builtin_model("logistic")
    e1 = np.max(np.abs(solve_ode(m, LOGISTIC, None, t, 2).states[:, 0] - exact))
    e4 = np.max(np.abs(solve_ode(m, LOGISTIC, None, t, 8).states[:, 0] - exact))
    assert e1 / e4 >= 100


def test_fn_bounded_and_oscillating():
    m = builtin_model("fn")
    traj = solve_ode(m, FN_TRUTH, FN_TRUTH, even_grid(0, 20, 201))
    v = traj.states[:, 0]
    assert np.all(np.abs(traj.states) < 3)
    crossings = np.sum(np.diff(np.sign(v - v.mean())) != 0)
    assert crossings >= 4


def test_zero_field_is_constant():
    traj = solve_ode(builtin_model("logistic"), {"a": 0.0, "b": 0.0}, [5.0], even_grid(0, 3, 4))
    np.testing.assert_array_equal(traj.states[:, 0], 5.0)


def test_blow_up_reported():
    with pytest.raises(NonFiniteState) as info:
        solve_ode(builtin_model("logistic"), {"a": 1.0, "b": -1.0}, [2.0], even_grid(0, 20, 21))
    assert 0 < info.value.t <= 20


def test_bad_inputs():
    m = builtin_model("logistic")
    with pytest.raises(ValueError):
        solve_ode(m, LOGISTIC, None, [0, 1, 1])
    with pytest.raises(ValueError):
        solve_ode(m, LOGISTIC, None, [0, 1], substeps=0)
    with pytest.raises(KeyError):
        solve_ode(m, {"a": 1.0}, None, [0, 1])
    with pytest.raises(KeyError):
        initial_state(builtin_model("fn"), {"V": 1.0})


def test_initial_state_forms():
    m = builtin_model("fn")
    np.testing.assert_array_equal(initial_state(m, {"v0": -1, "R": 2}), [-1, 2])
    np.testing.assert_array_equal(initial_state(m, [0.5, 0.25]), [0.5, 0.25])
    np.testing.assert_array_equal(initial_state(builtin_model("logistic"), None), [2.0])


def test_derivative_matches_vector_field():
    cm = compile_model(builtin_model("fn"))
    p = cm.param_vector(FN_TRUTH)
    v, r = 0.5, -0.2
    d = cm.derivative([v, r], p)
    assert d[0] == pytest.approx(3 * (v - v**3 / 3 + r))
    assert d[1] == pytest.approx(-(v - 0.34 + 0.2 * r) / 3)


def test_zero_noise_copies_trajectory():
    traj = solve_ode(builtin_model("fn"), FN_TRUTH, FN_TRUTH, even_grid(0, 20, 51))
    data = simulate_data(traj, NoiseModel.gaussian(0, 0), 3)
    np.testing.assert_array_equal(data.values, traj.states)


def test_seed_determinism():
    args = (builtin_model("fn"), FN_TRUTH, FN_TRUTH, even_grid(0, 20, 51),
            NoiseModel.gaussian(0.1, 0.2))
    a, b = simulate(*args, seed=9), simulate(*args, seed=9)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, simulate(*args, seed=10).values)


def test_lognormal_noise_scale():
    m = builtin_model("logistic")
    traj = solve_ode(m, LOGISTIC, None, even_grid(0, 20, 21))
    resid = np.concatenate([
        np.log(simulate_data(traj, NoiseModel.lognormal(0.2), r).values[:, 0])
        - np.log(traj.states[:, 0]) for r in range(1000)])
    assert resid.std() == pytest.approx(0.2, abs=0.01)


def test_marginals_match_noise_model():
    traj = solve_ode(builtin_model("fn"), FN_TRUTH, FN_TRUTH, even_grid(0, 20, 201))
    sig = (0.05, 0.1)
    z = []
    for r in range(25):
        d = simulate_data(traj, NoiseModel.gaussian(*sig), r)
        z.append(((d.values - traj.states) / np.array(sig)).ravel())
    z = np.concatenate(z)[:10**4]
    assert stats.kstest(z, "norm").pvalue > 0.01


def test_lognormal_needs_positive_trajectory():
    traj = solve_ode(builtin_model("fn"), FN_TRUTH, FN_TRUTH, even_grid(0, 20, 21))
    with pytest.raises(ValueError):
        simulate_data(traj, NoiseModel.lognormal(0.1, 0.1), 0)


def test_csv_round_trip(tmp_path):
    data = simulate(builtin_model("fn"), FN_TRUTH, FN_TRUTH, even_grid(0, 20, 21),
                    NoiseModel.gaussian(0.05, 0.05), 4)
    path = tmp_path / "d.csv"
    write_csv(data, path)
    assert path.read_text().splitlines()[0] == "t,V,R"
    back = read_csv(path)
    np.testing.assert_array_equal(back.values, data.values)
    np.testing.assert_array_equal(back.times, data.times)


def test_csv_errors(tmp_path):
    with pytest.raises(DataFileError, match="not found"):
        read_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("t,X\n0,1\n1,oops\n")
    with pytest.raises(DataFileError, match="line 3"):
        read_csv(bad)
    bad.write_text("t,X\n0,1\n")
    with pytest.raises(DataFileError, match="missing"):
        read_csv(bad, ["V"])


def test_time_series_validation():
    with pytest.raises(ValueError):
        TimeSeriesData(np.array([0.0, 0.0]), np.zeros((2, 1)), ("X",))
    with pytest.raises(ValueError):
        TimeSeriesData(np.array([0.0, 1.0]), np.array([[np.nan], [1.0]]), ("X",))
