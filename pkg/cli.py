#!/usr/bin/env python3
"""
Command-line front end.

    python cli.py simulate --design example1 --n 500 --reps 5 --seed 7 --out results/
    python cli.py fit      --data data.csv --response y --surrogate w --lambda 0.1
    python cli.py tune     --data data.csv --response y --surrogate w --out trace.csv
    python cli.py analyze  --data framingham.csv --response chd --surrogate lmsbp \\
                           --covariates chol age smoke --sigma-u 0.1122

Exit codes: 0 success, 2 usage or configuration error, 3 too many failed
replications, 4 solver failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from itertools import combinations

import numpy as np
import pandas as pd

import settings
from errors import ConfigError, MeasurementErrorModelError, StudyFailedError
from me_models import Dataset, build_model
from penalty import PenaltySpec
from semipar import SENSITIVITY_METHODS, KernelSpec, SemiparametricProfiler
from simharness import DESIGNS, StudyConfig, run_study, synthetic_framingham
from solver import PenalizedEESolver, SolverConfig
from tuning import select_lambda

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STUDY = 3
EXIT_SOLVER = 4

FAMILIES = {"logistic": "logistic_linear", "linear_normal": "linear_normal"}


@dataclass(frozen=True)
class AnalysisConfig:
    """Column roles, model terms and tuning settings for fits on user data."""

    input: str = None
    response: str = "y"
    surrogate: str = "w"
    covariates: tuple = ()
    index: str = None
    sigma_u: float = None
    sigma_u_var: float = None
    terms: tuple = None
    theta_terms: tuple = ()
    family: str = "logistic"
    sigma_e: float = 1.0
    penalty: str = "SCAD"
    a: float = 3.7
    lam: float = 0.0
    criterion: str = "bic"
    unpenalized: tuple = ()
    standardize: bool = True
    grid_min: float = 1e-3
    grid_max: float = 1.0
    grid_points: int = 40
    grid_size: int = None
    theta_grid: int = None
    sensitivity: str = "difference"
    posterior: str = "adaptive"
    seed: int = 0
    out: str = None

    def __post_init__(self):
        if self.sigma_u is not None and self.sigma_u_var is not None:
            raise ConfigError("Give the measurement error as sigma_u or sigma_u_var, not both")
        if self.sigma_u_var is not None:
            if self.sigma_u_var < 0:
                raise ConfigError(f"Error variance must be non-negative, got {self.sigma_u_var}")
            object.__setattr__(self, "sigma_u", float(np.sqrt(self.sigma_u_var)))
        elif self.sigma_u is None:
            object.__setattr__(self, "sigma_u", 0.0)
        if not np.isfinite(self.sigma_u) or self.sigma_u < 0:
            raise ConfigError(f"sigma_u must be non-negative, got {self.sigma_u}")
        if self.family not in FAMILIES:
            raise ConfigError(f"Unknown family {self.family!r}; expected one of {sorted(FAMILIES)}")
        if self.sensitivity not in SENSITIVITY_METHODS:
            raise ConfigError(f"sensitivity must be one of {SENSITIVITY_METHODS}, got {self.sensitivity!r}")
        if self.terms is not None and len(self.terms) == 0:
            raise ConfigError("The term list is empty")
        for name in ("covariates", "theta_terms", "unpenalized"):
            object.__setattr__(self, name, tuple(getattr(self, name) or ()))
        if self.terms is not None:
            object.__setattr__(self, "terms", tuple(self.terms))


def load_config(path):
    """JSON config file as a dict; keys mirror the dataclass fields."""
    if not path:
        return {}
    try:
        with open(path) as f:
            values = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config file {path}: {e}")
    if not isinstance(values, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    return values


def _overrides(args, mapping):
    """Flag values that were given on the command line, renamed to dataclass fields."""
    return {field_name: getattr(args, dest) for dest, field_name in mapping.items()
            if getattr(args, dest, None) is not None}


def _known(cls, values, label):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"Unknown {label} settings: {unknown}")
    return values


def _solver_config(values):
    values = dict(values or {})
    if "unpenalized" in values:
        values["unpenalized"] = tuple(values["unpenalized"])
    return SolverConfig(**_known(SolverConfig, values, "solver"))


def build_study_config(args):
    values = load_config(args.config)
    nested = {
        "solver": _solver_config(values.pop("solver", {})),
        "penalty": PenaltySpec(**_known(PenaltySpec, values.pop("penalty", {}), "penalty")),
        "kernel": KernelSpec(**_known(KernelSpec, values.pop("kernel", {}), "kernel")),
    }
    values.update(_overrides(args, {"design": "design", "n": "n", "reps": "replications", "seed": "seed",
                                    "sigma_u": "sigma_u", "grid_min": "grid_min", "grid_max": "grid_max",
                                    "grid_points": "grid_points", "n_mc": "n_mc", "jobs": "n_jobs",
                                    "out": "out_dir", "theta_grid": "theta_grid", "criteria": "criteria",
                                    "sensitivity": "sensitivity"}))
    if args.penalty is not None or args.a is not None:
        nested["penalty"] = PenaltySpec(family=args.penalty or nested["penalty"].family,
                                        a=args.a if args.a is not None else nested["penalty"].a)
    if "criteria" in values:
        values["criteria"] = tuple(values["criteria"])
    values.update(nested)
    return StudyConfig(**_known(StudyConfig, values, "study"))


def build_analysis_config(args):
    values = load_config(args.config)
    flags = _overrides(args, {
        "data": "input", "response": "response", "surrogate": "surrogate", "covariates": "covariates",
        "index": "index", "sigma_u": "sigma_u", "sigma_u_var": "sigma_u_var", "terms": "terms",
        "theta_terms": "theta_terms", "family": "family", "penalty": "penalty", "a": "a", "lam": "lam",
        "criterion": "criterion", "unpenalized": "unpenalized", "grid_min": "grid_min",
        "grid_max": "grid_max", "grid_points": "grid_points", "theta_grid": "theta_grid",
        "sensitivity": "sensitivity", "posterior": "posterior", "seed": "seed", "out": "out"})
    # an error flag replaces whichever form of the error the config file gave
    if "sigma_u" in flags or "sigma_u_var" in flags:
        values.pop("sigma_u", None)
        values.pop("sigma_u_var", None)
    values.update(flags)
    if getattr(args, "no_standardize", False):
        values["standardize"] = False
    config = AnalysisConfig(**_known(AnalysisConfig, values, "analysis"))
    if not config.input:
        raise ConfigError("No input CSV given (--data)")
    return config


# ----------------------------------------------------------------------
# data and model assembly
# ----------------------------------------------------------------------
def read_data(config):
    try:
        frame = pd.read_csv(config.input)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ConfigError(f"Cannot read CSV {config.input}: {e}")
    covariates = list(config.covariates) or [c for c in frame.columns
                                             if c not in (config.response, config.surrogate, config.index)]
    data = Dataset.from_frame(frame, response=config.response, surrogate=config.surrogate,
                              covariates=covariates, index=config.index)
    logger.info(f"Read {data.n} rows from {config.input}")
    return data


def _is_binary(column):
    return set(np.unique(column)).issubset({0.0, 1.0})


def standardize(data, sigma_u):
    """Center and scale W and the non-binary covariates; sigma_u is rescaled with W."""
    sd_w = float(np.std(data.w, ddof=1))
    if not sd_w > 0:
        raise ConfigError("The surrogate column is constant")
    covariates = data.covariates.copy()
    for j in range(covariates.shape[1]):
        column = covariates[:, j]
        sd = float(np.std(column, ddof=1))
        if not _is_binary(column) and sd > 0:
            covariates[:, j] = (column - column.mean()) / sd
    scaled = Dataset(w=(data.w - data.w.mean()) / sd_w, y=data.y, covariates=covariates,
                     covariate_names=data.covariate_names, z=data.z)
    return scaled, sigma_u / sd_w


def saturated_terms(surrogate, data):
    """Surrogate, its products with every covariate, intercept, covariates, squares and pairwise products."""
    names = list(data.covariate_names)
    terms = [surrogate] + [f"{surrogate}*{c}" for c in names] + ["1"] + names
    terms += [f"{c}^2" for j, c in enumerate(names) if not _is_binary(data.covariates[:, j])]
    terms += [f"{a}*{b}" for a, b in combinations(names, 2)]
    return tuple(terms)


def build_analysis(config):
    """Dataset, model and solver settings for an AnalysisConfig."""
    data = read_data(config)
    sigma_u = config.sigma_u
    if config.standardize:
        data, sigma_u = standardize(data, sigma_u)
    terms = config.terms if config.terms is not None else saturated_terms(config.surrogate, data)
    if config.theta_terms and "1" in terms:
        terms = tuple(t for t in terms if t != "1")
    model = build_model(FAMILIES[config.family], covariate_names=data.covariate_names, sigma_u=sigma_u,
                        terms=terms, theta_terms=config.theta_terms, grid_size=config.grid_size,
                        sigma_e=config.sigma_e, error_prone=config.surrogate)
    missing = [t for t in config.unpenalized if t not in model.terms]
    if missing:
        raise ConfigError(f"Unpenalized terms not in the model: {missing}")
    solver = SolverConfig(unpenalized=tuple(model.terms.index(t) for t in config.unpenalized),
                          posterior=config.posterior, seed=config.seed)
    penalty = PenaltySpec(family=config.penalty, a=config.a)
    return data, model, solver, penalty


def _fit_at(model, data, solver, penalty, lam, theta_grid=None, sensitivity="difference"):
    """Fit at one lambda with its sandwich covariance; semiparametric when the data carry an index."""
    if model.n_theta and data.semiparametric:
        profiler = SemiparametricProfiler(model, data, config=solver, theta_grid=theta_grid, sensitivity=sensitivity)
        unpen, profile = profiler.fit(0.0, penalty)
        fit, profile = (unpen, profile) if lam == 0 else profiler.fit(lam, penalty, start=unpen)
        if fit.active_set:
            fit.cov_hat = profiler.sandwich_cov(fit, profile)
        return fit
    ee = PenalizedEESolver(model, data, solver)
    fit = ee.solve_penalized(lam, penalty)
    if fit.active_set:
        fit.cov_hat = ee.sandwich_cov(fit)
    return fit


def _covariance(model, data, solver, fit, profile=None, theta_grid=None, sensitivity="difference"):
    if not fit.active_set:
        return None
    if profile is not None:
        profiler = SemiparametricProfiler(model, data, config=solver, theta_grid=theta_grid, sensitivity=sensitivity)
        return profiler.sandwich_cov(fit, profile)
    return PenalizedEESolver(model, data, solver).sandwich_cov(fit)


# ----------------------------------------------------------------------
# display
# ----------------------------------------------------------------------
def format_estimate(beta, se, active):
    if not active:
        return "0 (NA)"
    return f"{beta:.3f} ({se:.3f})" if np.isfinite(se) else f"{beta:.3f} (NA)"


def estimates_frame(model, fits):
    """One row per term; each fit contributes its estimate, SE and the formatted cell."""
    frame = pd.DataFrame({"term": list(model.terms)})
    for label, fit in fits.items():
        se = fit.se
        frame[f"{label}_estimate"] = fit.beta_hat
        frame[f"{label}_se"] = se
        frame[label] = [format_estimate(b, s, j in fit.active_set)
                        for j, (b, s) in enumerate(zip(fit.beta_hat, se))]
    return frame


def display_estimates(frame, labels):
    width = max(len(t) for t in frame["term"]) + 2
    print("\n=== ESTIMATES ===")
    print("term".ljust(width) + "".join(label.rjust(20) for label in labels))
    for _, row in frame.iterrows():
        print(str(row["term"]).ljust(width) + "".join(str(row[label]).rjust(20) for label in labels))


def _write_frame(frame, path, what):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    frame.to_csv(path, index=False)
    print(f"{what} saved to {path}")


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_simulate(args):
    config = build_study_config(args)
    if not config.out_dir:
        config = replace(config, out_dir=settings.RESULTS_DIR)
    report = run_study(config)
    print(report.to_markdown())
    print(f"Records and tables saved to {config.out_dir}")
    return EXIT_OK


def cmd_fit(args):
    config = build_analysis_config(args)
    data, model, solver, penalty = build_analysis(config)
    fit = _fit_at(model, data, solver, penalty, config.lam, config.theta_grid, config.sensitivity)
    frame = estimates_frame(model, {"fit": fit})
    display_estimates(frame, ["fit"])
    print(f"\nlambda={config.lam:g}  active={fit.n_active}  converged={fit.converged}  "
          f"iterations={fit.iterations}")
    if config.out:
        _write_frame(frame, config.out, "Estimates")
    return EXIT_OK if fit.converged else EXIT_SOLVER


def _tune(config):
    data, model, solver, penalty = build_analysis(config)
    trace = select_lambda(model, data, criterion=config.criterion, penalty=penalty, config=solver,
                          theta_grid=config.theta_grid, grid_points=config.grid_points,
                          grid_range=(config.grid_min, config.grid_max), sensitivity=config.sensitivity)
    return data, model, solver, trace


def cmd_tune(args):
    config = build_analysis_config(args)
    _, _, _, trace = _tune(config)
    print(trace.to_frame().to_string(index=False))
    print(f"\nSelected lambda: GCV={trace.selected['gcv']:.4g}  BIC={trace.selected['bic']:.4g}")
    if config.out:
        _write_frame(trace.to_frame(), config.out, "Tuning trace")
    return EXIT_OK


def cmd_analyze(args):
    config = build_analysis_config(args)
    data, model, solver, trace = _tune(config)
    semiparametric = bool(trace.profiles)
    fits = {"EE": trace.unpenalized}
    profiles = {"EE": trace.unpenalized_profile}
    for criterion in ("gcv", "bic"):
        fits[criterion.upper()] = trace.best_fit(criterion)
        profiles[criterion.upper()] = trace.best_profile(criterion)
    for label, fit in fits.items():
        try:
            fit.cov_hat = _covariance(model, data, solver, fit, profiles[label] if semiparametric else None,
                                      config.theta_grid, config.sensitivity)
        except MeasurementErrorModelError as e:
            logger.warning(f"No standard errors for the {label} fit: {e}")

    labels = list(fits)
    frame = estimates_frame(model, fits)
    display_estimates(frame, labels)
    print(f"\nSelected lambda: GCV={trace.selected['gcv']:.4g}  BIC={trace.selected['bic']:.4g}")
    if config.out:
        os.makedirs(config.out, exist_ok=True)
        _write_frame(frame, os.path.join(config.out, "analysis_results.csv"), "Results")
        _write_frame(trace.to_frame(), os.path.join(config.out, "tuning_trace.csv"), "Tuning trace")
        _write_frame(trace.normalized_curves(), os.path.join(config.out, "score_curves.csv"), "Score curves")
    return EXIT_OK


def cmd_make_framingham(args):
    frame, _ = synthetic_framingham(args.n or 1615, args.seed or 0)
    _write_frame(frame, args.out, "Synthetic data")
    return EXIT_OK


def _add_data_arguments(parser):
    parser.add_argument('--config', help='JSON file whose keys mirror AnalysisConfig fields')
    parser.add_argument('--data', help='Input CSV with a header row')
    parser.add_argument('--response', help='Response column (default: y)')
    parser.add_argument('--surrogate', help='Error-prone surrogate column W (default: w)')
    parser.add_argument('--covariates', nargs='+', help='Error-free covariate columns (default: all others)')
    parser.add_argument('--index', help='Scalar index Z of theta(Z) for semiparametric fits')
    parser.add_argument('--theta-terms', dest='theta_terms', nargs='+',
                        help='Terms multiplied by theta(Z), e.g. 1 (default: none)')
    parser.add_argument('--terms', nargs='+', help='Model terms, e.g. w w*z1 1 z1 z2^2 (default: saturated)')
    parser.add_argument('--family', choices=sorted(FAMILIES), help='Main model (default: logistic)')
    error = parser.add_mutually_exclusive_group()
    error.add_argument('--sigma-u', dest='sigma_u', type=float, help='Measurement error SD (default: 0)')
    error.add_argument('--sigma-u-var', dest='sigma_u_var', type=float, help='Measurement error variance')
    parser.add_argument('--penalty', type=str.upper, choices=["SCAD", "L1"], help='Penalty (default: SCAD)')
    parser.add_argument('--a', type=float, help='SCAD shape parameter (default: 3.7)')
    parser.add_argument('--unpenalized', nargs='+', help='Terms left unpenalized')
    parser.add_argument('--no-standardize', dest='no_standardize', action='store_true',
                        help='Keep W and covariates on their original scale')
    parser.add_argument('--posterior', choices=["adaptive", "grid"], help='Posterior quadrature (default: adaptive)')
    parser.add_argument('--theta-grid', dest='theta_grid', type=int,
                        help='Profile theta on this many Z targets and interpolate')
    parser.add_argument('--sensitivity', choices=list(SENSITIVITY_METHODS),
                        help='d theta_hat / d beta by re-profiling or by the implicit function theorem '
                             '(default: difference)')
    parser.add_argument('--seed', type=int, help='Seed for restarts (default: 0)')
    parser.add_argument('--out', help='Output path')


def _add_grid_arguments(parser):
    parser.add_argument('--criterion', type=str.lower, choices=["gcv", "bic"], help='Selector (default: bic)')
    parser.add_argument('--grid-min', dest='grid_min', type=float, help='Smallest lambda / max|beta| (default: 1e-3)')
    parser.add_argument('--grid-max', dest='grid_max', type=float, help='Largest lambda / max|beta| (default: 1)')
    parser.add_argument('--grid-points', dest='grid_points', type=int, help='Number of lambdas (default: 40)')


def build_parser():
    parser = argparse.ArgumentParser(description='Penalized locally efficient estimation for measurement error models')
    parser.add_argument('--log-level', dest='log_level', help=f'Logging level (default: {settings.LOG_LEVEL})')
    parser.add_argument('--log-file', dest='log_file', help='Also write the log to this file')
    sub = parser.add_subparsers(dest='command', required=True)

    sim = sub.add_parser('simulate', help='Run a replication study')
    sim.add_argument('--config', help='JSON file whose keys mirror StudyConfig fields')
    sim.add_argument('--design', help=f'One of {", ".join(DESIGNS)} (default: example1)')
    sim.add_argument('--n', type=int, help='Sample size (default: 500)')
    sim.add_argument('--reps', type=int, help='Replications (default: 200)')
    sim.add_argument('--seed', type=int, help='Master seed (default: 0)')
    sim.add_argument('--sigma-u', dest='sigma_u', type=float, help='Measurement error SD (default: 0.1)')
    sim.add_argument('--criteria', nargs='+', type=str.upper, help='Subset of EE GCV BIC (default: all)')
    sim.add_argument('--penalty', type=str.upper, choices=["SCAD", "L1"], help='Penalty (default: SCAD)')
    sim.add_argument('--a', type=float, help='SCAD shape parameter (default: 3.7)')
    sim.add_argument('--grid-min', dest='grid_min', type=float, help='Smallest lambda / max|beta| (default: 1e-3)')
    sim.add_argument('--grid-max', dest='grid_max', type=float, help='Largest lambda / max|beta| (default: 1)')
    sim.add_argument('--grid-points', dest='grid_points', type=int, help='Number of lambdas (default: 40)')
    sim.add_argument('--n-mc', dest='n_mc', type=int, help='Monte Carlo draws for C matrices (default: 100000)')
    sim.add_argument('--jobs', type=int, help=f'Worker processes (default: {settings.N_JOBS})')
    sim.add_argument('--theta-grid', dest='theta_grid', type=int, help='Z targets for theta profiling')
    sim.add_argument('--sensitivity', choices=list(SENSITIVITY_METHODS),
                     help='d theta_hat / d beta for profiled fits (default: implicit)')
    sim.add_argument('--out', help=f'Directory for the records CSV and tables (default: {settings.RESULTS_DIR})')
    sim.set_defaults(handler=cmd_simulate)

    fit = sub.add_parser('fit', help='Fit at one lambda')
    _add_data_arguments(fit)
    fit.add_argument('--lambda', dest='lam', type=float, help='Regularization parameter (default: 0)')
    fit.set_defaults(handler=cmd_fit)

    tune = sub.add_parser('tune', help='Score a lambda grid by GCV and BIC')
    _add_data_arguments(tune)
    _add_grid_arguments(tune)
    tune.set_defaults(handler=cmd_tune)

    analyze = sub.add_parser('analyze', help='EE, GCV and BIC fits with standard errors and score curves')
    _add_data_arguments(analyze)
    _add_grid_arguments(analyze)
    analyze.set_defaults(handler=cmd_analyze)

    synth = sub.add_parser('make-framingham', help='Write a synthetic Framingham-style CSV')
    synth.add_argument('--n', type=int, help='Rows (default: 1615)')
    synth.add_argument('--seed', type=int, help='Seed (default: 0)')
    synth.add_argument('--out', required=True, help='Output CSV')
    synth.set_defaults(handler=cmd_make_framingham)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    settings.configure_logging(args.log_level, args.log_file)

    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StudyFailedError as e:
        logger.error(str(e))
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_STUDY
    except MeasurementErrorModelError as e:
        logger.error(f"Solver failure ({e.code}): {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
