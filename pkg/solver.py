"""
Newton-Raphson solution of the penalized estimating equations

    (1/n) sum_i S*_eff(W_i, Z_i, Y_i; beta) - p'_lambda(beta) = 0

with the local quadratic approximation of the penalty, plus the sandwich covariance

    cov(beta_hat) = (1/n) (E - Sigma_lambda)^-1 F (E - Sigma_lambda)^-T

on the active set.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import statsmodels.api as sm
from statsmodels.tools.sm_exceptions import PerfectSeparationError

from errors import ConfigError, NonConvergenceError, SingularBreadError
from penalty import PenaltySpec, default_zero_threshold, lqa_weights, penalty_gradient
from score_engine import ScoreEngine

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-6
    max_iter: int = 100
    zero_threshold: float = None
    ridge: float = 0.0
    max_halvings: int = 10
    restarts: int = 5
    restart_sd: float = 0.25
    seed: int = 0
    unpenalized: tuple = ()
    posterior: str = "adaptive"

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.zero_threshold is not None and not self.zero_threshold > 0:
            raise ConfigError(f"zero_threshold must be positive, got {self.zero_threshold}")
        if self.ridge < 0:
            raise ConfigError(f"ridge must be non-negative, got {self.ridge}")
        object.__setattr__(self, "unpenalized", tuple(int(j) for j in self.unpenalized))


@dataclass
class FitResult:
    beta_hat: np.ndarray
    active_set: tuple
    lam: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    cov_hat: np.ndarray = None
    penalty: PenaltySpec = None
    term_names: tuple = ()
    residual: float = np.nan
    empty_model: bool = False
    restarts_used: int = 0

    @property
    def n_active(self):
        return len(self.active_set)

    @property
    def zero_set(self):
        return tuple(j for j in range(self.beta_hat.size) if j not in self.active_set)

    @property
    def se(self):
        """Standard errors aligned with beta_hat; NaN for excluded coefficients."""
        out = np.full(self.beta_hat.size, np.nan)
        if self.cov_hat is not None and self.active_set:
            out[list(self.active_set)] = np.sqrt(np.clip(np.diag(self.cov_hat), 0.0, None))
        return out

    def summary(self):
        return {
            "lambda": self.lam,
            "n_active": self.n_active,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual": self.residual,
        }


def newton_lqa(fun, jac, beta0, penalty, config, mask=()):
    """
    Damped Newton iteration with LQA on the working set.

    Args:
        fun (callable): fun(beta, coords) -> estimating function on coords
        jac (callable): jac(beta, coords) -> its Jacobian on coords x coords
        beta0 (ndarray): Start (the unpenalized estimate for penalized solves)
        penalty (PenaltySpec): None or lam == 0 means plain Newton, no zero locking
        mask (sequence): Unpenalized coordinates

    Returns:
        FitResult (converged or flagged); raises NonConvergenceError carrying the best iterate
    """
    beta = np.array(beta0, dtype=float)
    d = beta.size
    penalized = penalty is not None and penalty.lam > 0
    threshold = config.zero_threshold or default_zero_threshold(beta0)
    working = np.arange(d)
    trace = []
    best, best_norm = beta.copy(), np.inf

    def lqa(b):
        if not penalized:
            return np.zeros(d), np.zeros(d, dtype=bool)
        return lqa_weights(b, penalty, threshold, mask)

    for iteration in range(1, config.max_iter + 1):
        weights, locked = lqa(beta)
        newly = working[locked[working]]
        if newly.size:
            beta[newly] = 0.0
            working = working[~locked[working]]
            logger.debug(f"Iteration {iteration}: locked coefficients {newly.tolist()} at zero")
        if working.size == 0:
            return FitResult(beta_hat=np.zeros(d), active_set=(), lam=_lam(penalty), iterations=iteration,
                             converged=True, trace=trace, penalty=penalty, residual=0.0, empty_model=True)

        sig = weights[working]
        resid = fun(beta, working) - sig * beta[working]
        norm = np.max(np.abs(resid))
        if norm < best_norm:
            best, best_norm = beta.copy(), norm

        A = jac(beta, working) - np.diag(sig)
        if config.ridge:
            A = A - config.ridge * np.eye(working.size)
        step = _newton_step(A, resid)

        t, chosen, chosen_norm = 1.0, 1.0, np.inf
        for _ in range(config.max_halvings + 1):
            trial = beta.copy()
            trial[working] += t * step
            trial_resid = fun(trial, working) - sig * trial[working]
            trial_norm = np.max(np.abs(trial_resid)) if np.all(np.isfinite(trial_resid)) else np.inf
            if trial_norm < chosen_norm:
                chosen, chosen_norm = t, trial_norm
            if trial_norm < norm:
                break
            t *= 0.5
        else:
            # LQA residuals need not decrease monotonically; keep the best trial
            logger.debug(f"Iteration {iteration}: step halving exhausted")
        if not np.isfinite(chosen_norm):
            raise NonConvergenceError(
                f"Estimating function is not finite along the Newton step at iteration {iteration}",
                best=_flagged(best, working, penalty, iteration, trace, best_norm))
        beta[working] += chosen * step
        step_norm = float(np.max(np.abs(step)))
        trace.append(float(np.max(np.abs(chosen * step))))
        logger.debug(f"Iteration {iteration}: |step|={step_norm:.3e} |U|={norm:.3e} working={working.size}")

        if step_norm < config.tol:
            weights, locked = lqa(beta)
            beta[working[locked[working]]] = 0.0
            working = working[~locked[working]]
            if working.size == 0:
                return FitResult(beta_hat=np.zeros(d), active_set=(), lam=_lam(penalty), iterations=iteration,
                                 converged=True, trace=trace, penalty=penalty, residual=0.0, empty_model=True)
            grad = penalty_gradient(beta, penalty, mask)[working] if penalized else 0.0
            residual = float(np.max(np.abs(fun(beta, working) - grad)))
            if residual > 10 * config.tol:
                logger.warning(f"Converged fit has fixed-point residual {residual:.2e} above {10 * config.tol:.1e}")
            return FitResult(beta_hat=beta, active_set=tuple(int(j) for j in working), lam=_lam(penalty),
                             iterations=iteration, converged=True, trace=trace, penalty=penalty,
                             residual=residual)

    raise NonConvergenceError(f"Newton iteration did not converge in {config.max_iter} steps",
                              best=_flagged(best, working, penalty, config.max_iter, trace, best_norm))


def _flagged(beta, working, penalty, iterations, trace, norm):
    return FitResult(beta_hat=beta, active_set=tuple(int(j) for j in working), lam=_lam(penalty),
                     iterations=iterations, converged=False, trace=trace, penalty=penalty, residual=float(norm))


def _lam(penalty):
    return 0.0 if penalty is None else float(penalty.lam)


def _newton_step(A, resid):
    try:
        step = np.linalg.solve(A, -resid)
        if np.all(np.isfinite(step)):
            return step
    except np.linalg.LinAlgError:
        pass
    logger.warning("Encountered singularity in the Newton update, using a pseudo-inverse")
    return -np.linalg.pinv(A) @ resid


class PenalizedEESolver:
    """Penalized estimating-equation fits for one parametric model and dataset."""

    def __init__(self, model, data, config=None, engine=None):
        if model.n_theta:
            raise ConfigError("Model has theta terms; use the semiparametric profiler")
        self.model = model
        self.data = data
        self.config = config or SolverConfig()
        self.engine = engine or ScoreEngine(model, posterior=self.config.posterior)
        bad = [j for j in self.config.unpenalized if not 0 <= j < model.n_params]
        if bad:
            raise ConfigError(f"Unpenalized indices {bad} out of range for {model.n_params} coefficients")

    # estimating function pieces
    def estimating_function(self, beta, coords=None):
        value = self.engine.mean_eff_score(self.data.w, self.data.covariates, self.data.y, beta)
        return value if coords is None else value[coords]

    def jacobian(self, beta, coords=None):
        return self.engine.jacobian(self.data.w, self.data.covariates, self.data.y, beta,
                                    coords=coords, rows=coords)

    def naive_start(self):
        """Fit the main model with W in place of X."""
        design = self.model.design.evaluate(self.data.w[:, None], self.data.covariates)[:, 0, :]
        try:
            if self.model.main_model.binary:
                result = sm.Logit(self.data.y, design).fit(disp=0, maxiter=200)
            else:
                result = sm.OLS(self.data.y, design).fit()
            start = np.asarray(result.params, dtype=float)
            if np.all(np.isfinite(start)):
                return start
        except (np.linalg.LinAlgError, PerfectSeparationError, ValueError) as e:
            logger.warning(f"Naive initial fit failed: {e}")
        return np.zeros(self.model.n_params)

    def solve_unpenalized(self, beta_init=None):
        beta_init = self.naive_start() if beta_init is None else np.asarray(beta_init, dtype=float)
        if not np.all(np.isfinite(beta_init)):
            raise ConfigError("beta_init must be finite")
        fit = with_restarts(
            lambda start: newton_lqa(self.estimating_function, self.jacobian, start, None, self.config),
            beta_init, self.config)
        fit.term_names = tuple(self.model.term_names)
        return fit

    def solve_penalized(self, lam, penalty=None, start=None):
        """
        LQA-Newton solve at one lambda, started from the unpenalized estimate.

        Args:
            lam (float): Regularization parameter
            penalty (PenaltySpec): Family and shape; its lambda is replaced by `lam`
            start (FitResult): Unpenalized fit to start from (computed when omitted)

        Returns:
            FitResult
        """
        penalty = (penalty or PenaltySpec()).with_lambda(lam)
        unpen = start if start is not None else self.solve_unpenalized()
        if penalty.lam == 0:
            return replace(unpen, penalty=penalty, trace=list(unpen.trace))
        try:
            fit = newton_lqa(self.estimating_function, self.jacobian, unpen.beta_hat, penalty, self.config,
                             mask=self.config.unpenalized)
        except NonConvergenceError as e:
            logger.warning(f"Penalized fit at lambda={lam:.4g} did not converge")
            fit = e.best
        fit.term_names = tuple(self.model.term_names)
        if fit.empty_model:
            logger.warning(f"Every penalized coefficient is zero at lambda={lam:.4g}")
        return fit

    def sandwich_cov(self, fit):
        """Sandwich covariance on the active set of a converged fit."""
        if not fit.active_set:
            raise SingularBreadError("Sandwich covariance needs a nonempty active set")
        active = np.asarray(fit.active_set)
        beta = fit.beta_hat
        scores = self.engine.eff_score(self.data.w, self.data.covariates, self.data.y, beta)[:, active]
        E = self.jacobian(beta, active)
        F = scores.T @ scores / self.data.n
        sigma = np.zeros(active.size)
        if fit.penalty is not None and fit.penalty.lam > 0:
            threshold = self.config.zero_threshold or default_zero_threshold(beta)
            weights, _ = lqa_weights(beta, fit.penalty, threshold, self.config.unpenalized)
            sigma = weights[active]
        return sandwich(E, F, sigma, self.data.n)


def with_restarts(run, beta_init, config, label="Unpenalized fit"):
    """
    Run `run(start)` from beta_init, then from beta_init + N(0, restart_sd^2 I) after each
    NonConvergenceError, up to config.restarts times.

    Returns:
        FitResult: the first converged fit, else the best non-converged iterate
    """
    rng = np.random.default_rng(config.seed)
    best = None
    start = beta_init
    for attempt in range(config.restarts + 1):
        try:
            fit = run(start)
            fit.restarts_used = attempt
            logger.info(f"{label} converged in {fit.iterations} iterations (restart {attempt})")
            return fit
        except NonConvergenceError as e:
            if best is None or e.best.residual < best.residual:
                best = e.best
            logger.warning(f"{label} did not converge (attempt {attempt + 1})")
        start = beta_init + rng.normal(0.0, config.restart_sd, size=beta_init.size)
    best.restarts_used = config.restarts
    return best


def sandwich(E, F, sigma, n):
    """(1/n) (E - diag(sigma))^-1 F (E - diag(sigma))^-T, symmetrized."""
    bread = E - np.diag(sigma)
    cond = np.linalg.cond(bread)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularBreadError(f"Sandwich bread is numerically singular (condition {cond:.3e})")
    inv = np.linalg.inv(bread)
    cov = inv @ F @ inv.T / n
    return 0.5 * (cov + cov.T)


# ----------------------------------------------------------------------
# Functional interface
# ----------------------------------------------------------------------
def solve_unpenalized(model, data, beta_init=None, config=None):
    return PenalizedEESolver(model, data, config).solve_unpenalized(beta_init)


def solve_penalized(model, data, lam, penalty=None, config=None, start=None):
    return PenalizedEESolver(model, data, config).solve_penalized(lam, penalty, start)


def sandwich_cov(fit, model, data, config=None):
    return PenalizedEESolver(model, data, config).sandwich_cov(fit)
