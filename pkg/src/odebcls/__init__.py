"""Direct parameter estimation for ODE models by bias-corrected least squares."""

from .bcls import BclsFit, RankDeficient, StageFailure, fit_bcls
from .data import TimeSeriesData, read_csv, write_csv
from .model import ModelSpec, builtin_model, load_model, validate_model
from .nls import NlsConfig, NlsFit, fit_nls, sse_surface, weighted_sse
from .noise import NoiseModel, correct_basis, estimate_sigma
from .odesim import simulate, solve_ode

__all__ = [
    "BclsFit",
    "ModelSpec",
    "NlsConfig",
    "NlsFit",
    "NoiseModel",
    "RankDeficient",
    "StageFailure",
    "TimeSeriesData",
    "builtin_model",
    "correct_basis",
    "estimate_sigma",
    "fit_bcls",
    "fit_nls",
    "load_model",
    "read_csv",
    "simulate",
    "solve_ode",
    "sse_surface",
    "validate_model",
    "weighted_sse",
    "write_csv",
]

__version__ = "0.1.0"
