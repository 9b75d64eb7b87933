"""Command-line interface: ``odebcls <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path
from typing import Sequence


from .bcls import StageFailure, fit_bcls
from .data import DataFileError, TimeSeriesData, format_csv, read_csv
from .model import _ALIASES, ModelFileError, ModelSpec, builtin_model, ic_name, load_model
from .mc import (
    FN_TRUTHS,
    LOGISTIC_TRUTH,
    SCENARIOS,
    intervals_to_csv,
    nonparametric_bootstrap,
    parametric_bootstrap,
    run_monte_carlo,
    scenario,
)
from .nls import NlsConfig, fit_nls, local_minima, sse_surface
from .noise import NoiseKind, NoiseModel, estimate_sigma, noise_from_config
from .odesim import even_grid, simulate

THREADS_ENV = "ODEBCLS_THREADS"

DEFAULT_TRUTH = {
    "logistic": LOGISTIC_TRUTH,
    "fitzhugh_nagumo": FN_TRUTHS["A"],
}


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _g(x: float) -> str:
    return f"{x:.6g}"


def _load(spec: str) -> tuple[ModelSpec, dict, str | None]:
    """Model from a built-in name or JSON path; also returns the document and builtin key."""
    path = Path(spec)
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            raise CliError(f"model file not found: {path}")
        model, doc = load_model(path)
        return model, doc, None
    try:
        model = builtin_model(spec)
    except KeyError as exc:
        raise CliError(str(exc.args[0])) from None
    return model, {}, _ALIASES.get(spec.lower(), spec.lower())


def _read_data(path: str, model: ModelSpec) -> TimeSeriesData:
    if not Path(path).exists():
        raise CliError(f"data file not found: {path}")
    return read_csv(path, model.state_names)


def _default_kinds(model: ModelSpec) -> list[str]:
    return [NoiseKind.LOGNORMAL.value if model.transform_of(q) == "log" else NoiseKind.GAUSSIAN.value
            for q in range(model.s)]


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _assignments(text: str | None, what: str) -> dict[str, float]:
    out = {}
    for part in (text or "").split(","):
        if not part.strip():
            continue
        key, sep, val = part.partition("=")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            sep = ""
        if not sep:
            raise CliError(f"{what}: expected name=value pairs, got {part!r}")
    return out


def _noise(model: ModelSpec, doc: dict, sigma: str | None, data: TimeSeriesData | None,
           df: int = 3) -> NoiseModel:
    """``--sigma`` (numbers, one or per state, or ``estimate``) overrides the model file."""
    kinds = _default_kinds(model)
    if sigma is None:
        if "noise" in doc:
            return noise_from_config(doc["noise"], model.state_names, data, kinds)
        return NoiseModel(tuple(kinds), (0.0,) * model.s)
    if sigma.strip() == "estimate":
        if data is None:
            raise CliError("--sigma estimate needs --data")
        return NoiseModel(tuple(kinds), tuple(
            estimate_sigma(data, q, df, log=kinds[q] == "lognormal") for q in range(model.s)))
    values = _floats(sigma, "--sigma")
    if len(values) == 1:
        values = values * model.s
    if len(values) != model.s:
        raise CliError(f"--sigma needs 1 or {model.s} values")
    return NoiseModel(tuple(kinds), tuple(values))


def _truth(model: ModelSpec, key: str | None, text: str | None) -> dict[str, float]:
    values = dict(DEFAULT_TRUTH.get(key, {}))
    values.update(_assignments(text, "--params"))
    for n, v in zip(model.state_names, model.initial_conditions):
        if v is not None:
            values.setdefault(ic_name(n), v)
    missing = [p for p in model.parameter_names + model.ic_names if p not in values]
    if missing:
        raise CliError(f"--params lacks {', '.join(missing)}")
    return values


def _range(text: str, flag: str) -> tuple[float, float, int]:
    try:
        lo, hi, steps = text.split(":")
        return float(lo), float(hi), int(steps)
    except ValueError:
        raise CliError(f"{flag}: expected lo:hi:steps, got {text!r}") from None


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _threads(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be an integer") from None


# --------------------------------------------------------------------------
# commands


def cmd_estimate(args) -> int:
    model, doc, _ = _load(args.model)
    data = _read_data(args.data, model)
    noise = _noise(model, doc, args.sigma, data)
    fit = fit_bcls(model, data, noise, rule=args.rule, corrected=not args.no_bias_correction)
    label = "BCLS" if fit.corrected else "LS"
    rows = [(label, k, v) for k, v in fit.estimates.items()]
    print(f"{label} estimates ({args.rule} rule)")
    for k, v in fit.estimates.items():
        print(f"  {k:<8s} {_g(v)}")
    print("stage residual SD")
    for st in fit.stages:
        print(f"  {st.name or st.index:<8} {_g(st.residual_sd)}")
    if args.nls:
        free = model.parameter_names + model.estimated_ics
        known = {ic_name(n): v for n, v in zip(model.state_names, model.initial_conditions)
                 if v is not None}
        nfit = fit_nls(model, data, noise,
                       NlsConfig({p: fit.estimates[p] for p in free}, known))
        status = "converged" if nfit.converged else "not converged"
        print(f"NLS from {label} ({status}: {nfit.reason}, {nfit.iterations} iterations, "
              f"SSE {_g(nfit.sse)})")
        for k, v in nfit.estimates.items():
            print(f"  {k:<8s} {_g(v)}")
        rows += [("NLS", k, v) for k, v in nfit.estimates.items()]
    if args.out:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "param", "estimate"])
        w.writerows([(m, k, repr(v)) for m, k, v in rows])
        _write(buf.getvalue(), args.out)
    return 0


def cmd_simulate(args) -> int:
    model, doc, key = _load(args.model)
    truth = _truth(model, key, args.params)
    noise = _noise(model, doc, args.sigma, None)
    data = simulate(model, truth, truth, even_grid(args.t0, args.t1, args.n), noise, args.seed)
    _write(format_csv(data), args.out)
    if args.out:
        print(f"wrote {data.times.size} rows to {args.out}")
    return 0


def cmd_mc(args) -> int:
    sigma = _floats(args.sigma, "--sigma") if args.sigma else None
    n = [int(v) for v in _floats(args.n, "--n")] if args.n else None
    try:
        config = scenario(args.scenario, sigma, n, args.reps, args.seed)
    except KeyError as exc:
        raise CliError(str(exc.args[0])) from None
    summary = run_monte_carlo(config, _threads(args.threads))
    print(f"{'scenario':<28s} {'method':<20s} {'param':<6s} {'mean':>12s} {'mc_sd':>12s} "
          f"{'bias':>12s} {'conv':>6s}")
    for r in summary.rows:
        conv = "" if r.conv_rate is None else f"{100 * r.conv_rate:.1f}%"
        print(f"{r.scenario:<28s} {r.method:<20s} {r.param:<6s} {_g(r.mean):>12s} "
              f"{_g(r.mc_sd):>12s} {_g(r.bias):>12s} {conv:>6s}")
    if args.out:
        _write(summary.to_csv(), args.out)
    return 0


def cmd_bootstrap(args) -> int:
    model, doc, _ = _load(args.model)
    data = _read_data(args.data, model)
    noise = _noise(model, doc, args.sigma, data)
    corrected = not args.no_bias_correction
    intervals = []
    if args.kind in ("parametric", "both"):
        fit = fit_bcls(model, data, noise, rule=args.rule, corrected=corrected)
        intervals += parametric_bootstrap(model, fit, noise, data.times, args.B, args.seed,
                                          args.level, corrected)
    if args.kind in ("nonparametric", "both"):
        intervals += nonparametric_bootstrap(data, model, noise, args.B, args.seed, None,
                                             args.level, args.rule, corrected)
    for ci in intervals:
        print(f"  {ci.kind:<14s} {ci.param:<8s} ({_g(ci.lower)}, {_g(ci.upper)})  "
              f"level {ci.level:g}, {ci.replicates} resamples")
    if args.out:
        _write(intervals_to_csv(intervals), args.out)
    return 0


def cmd_surface(args) -> int:
    model, doc, key = _load(args.model)
    truth = _truth(model, key, args.params)
    if args.data:
        data = _read_data(args.data, model)
    else:
        data = simulate(model, truth, truth, even_grid(args.t0, args.t1, args.n),
                        NoiseModel(tuple(_default_kinds(model)), (0.0,) * model.s), args.seed)
    noise = _noise(model, doc, args.sigma, data)
    states = tuple(s.strip() for s in args.states.split(",")) if args.states else None
    for s in states or ():
        if s not in model.state_names:
            raise CliError(f"--states: unknown state {s!r}")
    x, y = args.x_param, args.y_param
    grid = sse_surface(model, data, noise, (x, *_range(args.a_range, "--a-range")),
                       (y, *_range(args.b_range, "--b-range")), truth, states)
    _write(grid.to_csv(), args.out)
    if args.out:
        print(f"wrote {grid.sse.size} grid cells to {args.out}")
        for u, v, s in local_minima(grid):
            print(f"  local minimum {x}={_g(u)} {y}={_g(v)} sse={_g(s)}")
    return 0


def cmd_sigma(args) -> int:
    if not Path(args.data).exists():
        raise CliError(f"data file not found: {args.data}")
    data = read_csv(args.data)
    names = [s.strip() for s in args.states.split(",")] if args.states else data.state_names
    rows = []
    for name in names:
        if name not in data.state_names:
            raise CliError(f"--states: no column {name!r} in {args.data}")
        rows.append((name, estimate_sigma(data, name, args.df, log=args.log)))
        print(f"  {name:<8s} {_g(rows[-1][1])}")
    if args.out:
        _write("state,sigma\n" + "".join(f"{n},{s!r}\n" for n, s in rows), args.out)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odebcls",
                                description="Direct bias-corrected least squares for ODE models.")
    sub = p.add_subparsers(dest="command", required=True)

    def model_opt(sp, default=None):
        sp.add_argument("--model", default=default, required=default is None,
                        help="built-in name (logistic, fn) or model JSON path")

    def estimator_opts(sp):
        sp.add_argument("--sigma", help="noise SD: one value, one per state, or 'estimate'")
        sp.add_argument("--rule", default="trapezoid", choices=("trapezoid", "left_endpoint"))
        sp.add_argument("--no-bias-correction", action="store_true")

    sp = sub.add_parser("estimate", help="fit a model to a data file")
    model_opt(sp)
    sp.add_argument("--data", required=True)
    estimator_opts(sp)
    sp.add_argument("--nls", action="store_true", help="refine with NLS started at the BCLS fit")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("simulate", help="write noisy observations of a model solution")
    model_opt(sp, "logistic")
    sp.add_argument("--params", help="name=value pairs (parameters and initial conditions)")
    sp.add_argument("--sigma")
    sp.add_argument("--t0", type=float, default=0.0)
    sp.add_argument("--t1", type=float, default=20.0)
    sp.add_argument("--n", type=int, default=21, help="number of observation times")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("mc", help="Monte Carlo study from a preset scenario")
    sp.add_argument("--scenario", required=True, choices=sorted(SCENARIOS))
    sp.add_argument("--sigma", help="comma-separated noise levels")
    sp.add_argument("--n", help="comma-separated observation counts")
    sp.add_argument("--reps", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, help=f"worker processes (default ${THREADS_ENV} or 1)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_mc)

    sp = sub.add_parser("bootstrap", help="bootstrap confidence intervals for a BCLS fit")
    model_opt(sp)
    sp.add_argument("--data", required=True)
    estimator_opts(sp)
    sp.add_argument("--kind", default="both", choices=("parametric", "nonparametric", "both"))
    sp.add_argument("-B", "--B", type=int, default=1000, dest="B")
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bootstrap)

    sp = sub.add_parser("surface", help="weighted SSE over a two-parameter grid")
    model_opt(sp, "fn")
    sp.add_argument("--data", help="observations (default: zero-noise simulation at --params)")
    sp.add_argument("--params", help="values for parameters held fixed / the simulation truth")
    sp.add_argument("--sigma")
    sp.add_argument("--states", help="comma-separated states entering the SSE (default all)")
    sp.add_argument("--x-param", default="a")
    sp.add_argument("--y-param", default="b")
    sp.add_argument("--a-range", default="0.3:2.2:50", help="lo:hi:steps for --x-param")
    sp.add_argument("--b-range", default="0:3:50", help="lo:hi:steps for --y-param")
    sp.add_argument("--t0", type=float, default=0.0)
    sp.add_argument("--t1", type=float, default=20.0)
    sp.add_argument("--n", type=int, default=201)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_surface)

    sp = sub.add_parser("sigma", help="noise SD from a natural spline fit")
    sp.add_argument("--data", required=True)
    sp.add_argument("--states")
    sp.add_argument("--df", type=int, default=3)
    sp.add_argument("--log", action="store_true", help="smooth log observations")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sigma)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ModelFileError, DataFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
