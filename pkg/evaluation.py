"""
Model-error metrics for simulation studies.

    AME   = (beta_hat - beta0)' C_X (beta_hat - beta0)
    AME_W = (beta_hat - beta0)' C_W (beta_hat - beta0)

with C = E[ {g^-1}'(theta(Z) + beta0' V)^2 V V' ] estimated by Monte Carlo, V built from
the true X (C_X) or from W (C_W). RAME is the ratio for a selected fit over the
unpenalized fit on the same data.
"""

import hashlib
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
from statsmodels.robust.scale import mad

import settings
from errors import ConfigError
from me_models import as_rows

logger = logging.getLogger(__name__)

MIN_MC_DRAWS = 10_000
MC_CHUNK = 50_000
MAD_SCALE = 0.6745


@dataclass
class ErrorMetricContext:
    """C_X and C_W for one design together with the truth they were built around."""

    C_X: np.ndarray
    C_W: np.ndarray
    beta0: np.ndarray
    zero_set: tuple = ()

    def __post_init__(self):
        self.beta0 = np.asarray(self.beta0, dtype=float)
        d = self.beta0.size
        for name in ("C_X", "C_W"):
            C = np.asarray(getattr(self, name), dtype=float)
            if C.shape != (d, d):
                raise ConfigError(f"{name} has shape {C.shape}, expected {(d, d)}")
            scale = max(1.0, float(np.max(np.abs(C))))
            if np.max(np.abs(C - C.T)) > 1e-8 * scale:
                raise ConfigError(f"{name} is not symmetric")
            if np.min(np.linalg.eigvalsh(0.5 * (C + C.T))) < -1e-8 * scale:
                raise ConfigError(f"{name} is not positive semidefinite")
            setattr(self, name, 0.5 * (C + C.T))
        self.zero_set = tuple(int(j) for j in self.zero_set)

    def matrix(self, use_W=False):
        return self.C_W if use_W else self.C_X


def _seed_label(seed):
    return "-".join(str(int(s)) for s in np.atleast_1d(seed))


def _cache_path(design, beta0, theta0, n_mc, seed, use_W, cache_dir):
    tag = hashlib.sha1(np.ascontiguousarray(beta0, dtype=float).tobytes()).hexdigest()[:10]
    theta_tag = "theta" if theta0 is not None else "notheta"
    name = f"C_{design.name}_{'W' if use_W else 'X'}_{theta_tag}_seed{_seed_label(seed)}_n{n_mc}_{tag}.csv"
    return os.path.join(cache_dir, name)


def _read_cached(path, d):
    frame = pd.read_csv(path, comment="#")
    C = frame.to_numpy(float)
    if C.shape != (d, d):
        logger.warning(f"Ignoring cached C matrix {path} with shape {C.shape}")
        return None
    return C


def _write_cached(path, C, design, seed, n_mc, use_W, term_names):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# design={design.name} seed={_seed_label(seed)} n_mc={n_mc} use_W={int(bool(use_W))}\n")
        pd.DataFrame(C, columns=list(term_names)).to_csv(f, index=False)


def _chunk_sum(design, beta0, theta0, use_W, size, seed_seq):
    rng = np.random.default_rng(seed_seq)
    draws = design.sample_covariates(size, rng)
    model = design.model
    x = draws["w"] if use_W else draws["x"]
    V = model.beta_design.evaluate(x[:, None], draws["covariates"])[:, 0, :]
    eta = V @ beta0
    if theta0 is not None and model.n_theta:
        theta = as_rows(theta0(draws["z"]), size)
        theta_design = model.design.evaluate(x[:, None], draws["covariates"])[:, 0, model.n_beta:]
        eta = eta + np.sum(theta * theta_design, axis=1)
    weight = model.main_model.mean_derivative(eta) ** 2
    return V.T @ (weight[:, None] * V)


def estimate_C(design, beta0, theta0=None, n_mc=100_000, seed=0, use_W=False, cache=True, cache_dir=None):
    """
    Monte Carlo estimate of the model-error matrix.

    Draws are taken in chunks, each from its own SeedSequence child of `seed`, so the
    result depends only on (design, beta0, n_mc, seed).

    Args:
        design (SimulationDesign): Covariate sampler and model of the study
        beta0 (ndarray): True coefficients
        theta0 (callable): True theta(z) for semiparametric designs; None means theta = 0
        n_mc (int): Number of draws, at least 10^4
        use_W (bool): Build V from W instead of X

    Returns:
        ndarray: (d, d) symmetric PSD matrix
    """
    n_mc = int(n_mc)
    if n_mc < MIN_MC_DRAWS:
        raise ConfigError(f"n_mc must be at least {MIN_MC_DRAWS}, got {n_mc}")
    beta0 = np.asarray(beta0, dtype=float)
    d = beta0.size
    cache_dir = cache_dir or settings.CACHE_DIR
    path = _cache_path(design, beta0, theta0, n_mc, seed, use_W, cache_dir)
    if cache and os.path.exists(path):
        C = _read_cached(path, d)
        if C is not None:
            logger.info(f"Loaded C_{'W' if use_W else 'X'} for {design.name} from {path}")
            return C

    sizes = [MC_CHUNK] * (n_mc // MC_CHUNK)
    if n_mc % MC_CHUNK:
        sizes.append(n_mc % MC_CHUNK)
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    total = np.zeros((d, d))
    for size, child in zip(sizes, children):
        total += _chunk_sum(design, beta0, theta0, use_W, size, child)
    C = total / n_mc
    C = 0.5 * (C + C.T)
    logger.info(f"Estimated C_{'W' if use_W else 'X'} for {design.name} from {n_mc} draws")

    if cache:
        _write_cached(path, C, design, seed, n_mc, use_W, design.model.terms)
    return C


def build_context(design, n_mc=100_000, seed=0, cache=True, cache_dir=None):
    """C_X and C_W for a design, both from the same master seed."""
    theta0 = design.theta if design.model.n_theta else None
    C_X = estimate_C(design, design.beta, theta0, n_mc, seed, use_W=False, cache=cache, cache_dir=cache_dir)
    C_W = estimate_C(design, design.beta, theta0, n_mc, seed, use_W=True, cache=cache, cache_dir=cache_dir)
    return ErrorMetricContext(C_X=C_X, C_W=C_W, beta0=design.beta, zero_set=design.zero_set)


def _beta_of(fit_or_beta):
    return np.asarray(getattr(fit_or_beta, "beta_hat", fit_or_beta), dtype=float)


def ame(beta_hat, context, use_W=False):
    """Approximate model error; excluded coefficients enter as exact zeros."""
    diff = _beta_of(beta_hat) - context.beta0
    if diff.size != context.beta0.size:
        raise ConfigError(f"Estimate has {diff.size} coefficients, truth has {context.beta0.size}")
    return float(max(diff @ context.matrix(use_W) @ diff, 0.0))


def rame(selected, full, context, use_W=False):
    """AME of the selected fit relative to the unpenalized fit; inf when the latter is 0."""
    denominator = ame(full, context, use_W)
    numerator = ame(selected, context, use_W)
    if denominator == 0.0:
        logger.warning("Full-model AME is zero, relative model error is undefined")
        return float("inf")
    return numerator / denominator


def count_zeros(fit, true_zero_set):
    """
    (C, E): estimated zeros that are truly zero, and estimated zeros that are not.

    Args:
        fit (FitResult or ndarray): Fit, or a coefficient vector with exact zeros
        true_zero_set (iterable): Indices of the true zero coefficients
    """
    if hasattr(fit, "zero_set"):
        zeros = set(fit.zero_set)
    else:
        zeros = set(np.flatnonzero(np.asarray(fit, dtype=float) == 0.0).tolist())
    truth = set(int(j) for j in true_zero_set)
    return float(len(zeros & truth)), float(len(zeros - truth))


def scaled_mad(values):
    """Median absolute deviation divided by 0.6745, ignoring non-finite values."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return float("nan")
    return float(mad(values, c=MAD_SCALE))


def theta_rmse(targets, theta_hat, truth, trim=0.1):
    """
    Root mean squared error of the first profiled theta component against truth(z),
    over targets inside the central (1 - 2 * trim) share of the target range.
    """
    targets = np.asarray(targets, dtype=float)
    theta_hat = np.asarray(theta_hat, dtype=float).reshape(targets.size, -1)[:, 0]
    if not 0.0 <= trim < 0.5:
        raise ConfigError(f"trim must lie in [0, 0.5), got {trim}")
    lo, hi = targets.min(), targets.max()
    margin = trim * (hi - lo)
    inside = (targets >= lo + margin) & (targets <= hi - margin)
    if not np.any(inside):
        raise ConfigError("No theta targets left after trimming")
    return float(np.sqrt(np.mean((theta_hat[inside] - truth(targets[inside])) ** 2)))
