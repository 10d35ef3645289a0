"""
Tuning parameter selection for the penalized fits.

For a fit at lambda with active set I,

    df     = trace{ I_n (I_n + n Sigma_lambda)^-1 },   I_n = V' Q V
    GCV    = D / { n (1 - df / n)^2 }
    BIC    = D + 2 log(n) df

where V is the active design with W standing in for X, Q = diag of the main-model
information weights at mu_hat, and D is the deviance of mu_hat. Sigma_lambda is the
LQA diagonal on the mean-score scale, hence the factor n against the summed I_n.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import AllFitsFailedError, ConfigError, DFSaturatedError, MeasurementErrorModelError, SingularInfoError
from penalty import PenaltySpec, default_zero_threshold, lqa_weights
from semipar import SemiparametricProfiler
from solver import PenalizedEESolver, SolverConfig

logger = logging.getLogger(__name__)

CRITERIA = ("gcv", "bic")
MU_CLAMP = 1e-10
DEFAULT_GRID_POINTS = 40
TRACE_COLUMNS = ["lambda", "df", "deviance", "gcv", "bic", "n_active", "converged"]


def default_grid(beta_unpenalized, points=DEFAULT_GRID_POINTS, low=1e-3, high=1.0, unpenalized=()):
    """Log-spaced lambdas in [low, high] * max |beta_hat| over the penalized coordinates."""
    beta = np.abs(np.asarray(beta_unpenalized, dtype=float))
    penalized = np.setdiff1d(np.arange(beta.size), np.asarray(unpenalized, dtype=int))
    scale = float(np.max(beta[penalized])) if penalized.size else 0.0
    if not scale > 0:
        scale = 1.0
    return np.exp(np.linspace(np.log(low * scale), np.log(high * scale), int(points)))


def check_grid(grid):
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ConfigError("The lambda grid is empty")
    if not np.all(np.isfinite(grid)) or np.any(grid < 0):
        raise ConfigError("Lambda grid values must be finite and non-negative")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ConfigError("Lambda grid must be strictly increasing")
    return grid


def fitted_predictor(fit, data, model, theta=None):
    """Linear predictor with W in place of X (and theta_hat_i added for profiled fits)."""
    design = model.beta_design.evaluate(data.w[:, None], data.covariates)[:, 0, :]
    eta = design @ fit.beta_hat
    if model.n_theta:
        if theta is None:
            raise ConfigError("Profiled fits need theta_hat to form the fitted predictor")
        theta_design = model.design.evaluate(data.w[:, None], data.covariates)[:, 0, model.n_beta:]
        eta = eta + np.sum(theta_design * theta, axis=1)
    return eta


def fitted_mean(fit, data, model, theta=None):
    return model.main_model.mean(fitted_predictor(fit, data, model, theta))


def _sigma_lambda(fit, active, config):
    if fit.penalty is None or fit.penalty.lam == 0:
        return np.zeros(active.size)
    threshold = config.zero_threshold or default_zero_threshold(fit.beta_hat)
    weights, _ = lqa_weights(fit.beta_hat, fit.penalty, threshold, config.unpenalized)
    return weights[active]


def effective_df(fit, data, model, theta=None, config=None):
    """
    Effective number of parameters of a fit.

    Args:
        fit (FitResult): Fit at one lambda
        data (Dataset): Data the fit was computed on
        model (MEModelSpec): Model of the fit
        theta (ndarray): theta_hat_i for profiled fits

    Returns:
        float: df in [0, |active set|]
    """
    config = config or SolverConfig()
    active = np.asarray(fit.active_set, dtype=int)
    if active.size == 0:
        return 0.0
    eta = fitted_predictor(fit, data, model, theta)
    V = model.beta_design.evaluate(data.w[:, None], data.covariates)[:, 0, active]
    Q = model.main_model.information_weight(eta)
    info = V.T @ (Q[:, None] * V)
    sigma = _sigma_lambda(fit, active, config)
    return df_from_information(info, sigma, data.n)


def df_from_information(info, sigma, n):
    """trace{ I (I + n diag(sigma))^-1 } for a summed information matrix I."""
    info = np.atleast_2d(np.asarray(info, dtype=float))
    total = info + n * np.diag(np.asarray(sigma, dtype=float))
    cond = np.linalg.cond(total)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularInfoError(f"I + Sigma_lambda is numerically singular (condition {cond:.3e})")
    return float(np.trace(np.linalg.solve(total.T, info.T).T))


def binomial_deviance(y, mu):
    """2 sum[ y log(y/mu) + (1-y) log{(1-y)/(1-mu)} ] with mu clamped and 0 log 0 = 0."""
    y = np.asarray(y, dtype=float)
    mu = np.clip(np.asarray(mu, dtype=float), MU_CLAMP, 1.0 - MU_CLAMP)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(y > 0, y * np.log(y / mu), 0.0)
        neg = np.where(y < 1, (1.0 - y) * np.log((1.0 - y) / (1.0 - mu)), 0.0)
    return float(2.0 * np.sum(pos + neg))


def deviance(fit, data, model, theta=None):
    """Binomial deviance for logistic fits, -2 Gaussian log-likelihood otherwise."""
    eta = fitted_predictor(fit, data, model, theta)
    if model.main_model.binary:
        return binomial_deviance(data.y, model.main_model.mean(eta))
    return float(-2.0 * np.sum(model.main_model.log_density(data.y, eta)))


def gcv_from(dev, df, n):
    if df >= n:
        raise DFSaturatedError(f"Effective df {df:.3f} is not below n={n}")
    return float(dev / (n * (1.0 - df / n) ** 2))


def bic_from(dev, df, n):
    if df >= n:
        raise DFSaturatedError(f"Effective df {df:.3f} is not below n={n}")
    return float(dev + 2.0 * np.log(n) * df)


def gcv_score(fit, data, model, theta=None, config=None):
    return gcv_from(deviance(fit, data, model, theta), effective_df(fit, data, model, theta, config), data.n)


def bic_score(fit, data, model, theta=None, config=None):
    return bic_from(deviance(fit, data, model, theta), effective_df(fit, data, model, theta, config), data.n)


@dataclass
class TuningTrace:
    """Scores of every fit on the lambda grid plus the minimizing lambda for each criterion."""

    lambdas: np.ndarray
    records: pd.DataFrame
    fits: list = field(default_factory=list)
    profiles: list = field(default_factory=list)
    unpenalized: object = None
    unpenalized_profile: object = None
    selected: dict = field(default_factory=dict)
    criterion: str = "bic"

    @property
    def best_lambda(self):
        return self.selected[self.criterion]

    def best_fit(self, criterion=None):
        lam = self.selected[criterion or self.criterion]
        return self.fits[int(np.flatnonzero(self.lambdas == lam)[0])]

    def best_profile(self, criterion=None):
        if not self.profiles:
            return None
        lam = self.selected[criterion or self.criterion]
        return self.profiles[int(np.flatnonzero(self.lambdas == lam)[0])]

    def to_frame(self):
        return self.records[TRACE_COLUMNS].copy()

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        logger.info(f"Tuning trace written to {path}")

    def normalized_curves(self):
        """GCV and BIC rescaled to [0, 1] over the finite entries of the grid."""
        frame = pd.DataFrame({"lambda": self.lambdas})
        for name in CRITERIA:
            values = self.records[name].to_numpy(float)
            finite = np.isfinite(values)
            out = np.full(values.size, np.nan)
            if finite.any():
                lo, hi = values[finite].min(), values[finite].max()
                out[finite] = 0.0 if hi == lo else (values[finite] - lo) / (hi - lo)
            frame[name] = out
        return frame


def select_lambda(model, data, grid=None, criterion="bic", penalty=None, config=None, kernel=None,
                  theta_grid=None, grid_points=DEFAULT_GRID_POINTS, grid_range=(1e-3, 1.0),
                  sensitivity="difference", engine=None):
    """
    Fit every lambda of the grid and pick the minimizers of GCV and BIC.

    Args:
        model (MEModelSpec): Parametric model, or one with theta terms for profiled fits
        data (Dataset): Observations; a dataset with z takes the semiparametric path
        grid (sequence): Strictly increasing lambdas; default from the unpenalized fit
        criterion (str): "gcv" or "bic", the criterion reported by TuningTrace.best_lambda
        penalty (PenaltySpec): Penalty family and shape
        sensitivity (str): How profiled fits differentiate theta_hat in beta ("difference" or "implicit")
        engine (ScoreEngine): Shared score engine, so cached integral-equation solves are reused

    Returns:
        TuningTrace
    """
    criterion = str(criterion).lower()
    if criterion not in CRITERIA:
        raise ConfigError(f"Unknown criterion {criterion!r}; expected one of {CRITERIA}")
    config = config or SolverConfig()
    penalty = penalty or PenaltySpec()

    semiparametric = data.semiparametric and model.n_theta > 0
    if semiparametric:
        profiler = SemiparametricProfiler(model, data, kernel, config, engine=engine, theta_grid=theta_grid,
                                          sensitivity=sensitivity)
        unpen, unpen_profile = profiler.fit(0.0, penalty, sensitivities=False)

        def fit_at(lam):
            return profiler.fit(lam, penalty, start=unpen, sensitivities=False)
    else:
        solver = PenalizedEESolver(model, data, config, engine=engine)
        unpen, unpen_profile = solver.solve_unpenalized(), None

        def fit_at(lam):
            return solver.solve_penalized(lam, penalty, start=unpen), None

    if grid is None:
        grid = default_grid(unpen.beta_hat[:model.n_beta], grid_points, *grid_range, unpenalized=config.unpenalized)
    grid = check_grid(grid)

    rows, fits, profiles = [], [], []
    for lam in grid:
        row = {"lambda": float(lam), "df": np.nan, "deviance": np.nan, "gcv": np.nan, "bic": np.nan,
               "n_active": np.nan, "converged": False}
        fit, profile = None, None
        try:
            fit, profile = fit_at(lam)
            theta = None if profile is None else profile.theta
            row["n_active"] = fit.n_active
            row["converged"] = bool(fit.converged)
            row["deviance"] = deviance(fit, data, model, theta)
            row["df"] = effective_df(fit, data, model, theta, config)
            row["gcv"] = gcv_from(row["deviance"], row["df"], data.n)
            row["bic"] = bic_from(row["deviance"], row["df"], data.n)
        except MeasurementErrorModelError as e:
            logger.warning(f"Fit at lambda={lam:.4g} failed ({e.code}): {e}")
        rows.append(row)
        fits.append(fit)
        profiles.append(profile)
        logger.debug(f"lambda={lam:.4g} df={row['df']:.3f} GCV={row['gcv']:.4f} BIC={row['bic']:.4f}")

    records = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    usable = records["converged"].to_numpy(bool) & np.isfinite(records["bic"].to_numpy(float))
    if not usable.any():
        raise AllFitsFailedError(f"None of the {grid.size} fits on the lambda grid converged")
    excluded = int(grid.size - usable.sum())
    if excluded:
        logger.warning(f"{excluded} of {grid.size} lambda values excluded from selection (failed or not converged)")

    selected = {}
    for name in CRITERIA:
        values = np.where(usable, records[name].to_numpy(float), np.inf)
        selected[name] = float(grid[int(np.argmin(values))])
    logger.info(f"Selected lambda: GCV={selected['gcv']:.4g}, BIC={selected['bic']:.4g}")
    return TuningTrace(lambdas=grid, records=records, fits=fits, profiles=profiles if semiparametric else [],
                       unpenalized=unpen, unpenalized_profile=unpen_profile, selected=selected, criterion=criterion)
