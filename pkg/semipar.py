"""
Semiparametric fits: theta(Z) is profiled by kernel-weighted local estimating equations

    sum_i K_h(z_i - z) Psi(w_i, z_i, s_i, y_i; beta, theta) = 0

and beta solves the penalized profiled equation

    (1/n) sum_i L(w_i, z_i, s_i, y_i; beta, theta_hat_i(beta)) - p'_lambda(beta) = 0.

L and Psi are the first d and last m components of the efficient score of the
parametric model in which theta(Z) is replaced by a free m-vector.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
import statsmodels.api as sm
from scipy import integrate
from statsmodels.tools.sm_exceptions import PerfectSeparationError

from errors import (ConfigError, EmptyWindowError, NonConvergenceError, SingularBreadError,
                    SingularOmegaError)
from penalty import PenaltySpec, default_zero_threshold, lqa_weights
from score_engine import ScoreEngine, step_size
from solver import SolverConfig, newton_lqa, sandwich, with_restarts

logger = logging.getLogger(__name__)

# raw kernels on [-1, 1] with their second moments
_RAW_KERNELS = {
    "quartic": (lambda u: 15.0 / 16.0 * (1.0 - u ** 2) ** 2, 1.0 / 7.0),
    # triweight: the smooth member of the Epanechnikov family (1 - u^2)^k
    "epanechnikov-smooth": (lambda u: 35.0 / 32.0 * (1.0 - u ** 2) ** 3, 1.0 / 9.0),
}

MAX_BANDWIDTH_DOUBLINGS = 3
THETA_TOL = 1e-8
THETA_MAX_ITER = 50
SENSITIVITY_METHODS = ("difference", "implicit")


@dataclass(frozen=True)
class KernelSpec:
    """
    Symmetric compactly supported kernel, rescaled so that int t^2 K(t) dt = 1.
    The rescaled kernel lives on [-support, support].
    """

    family: str = "quartic"
    bandwidth: float = None

    def __post_init__(self):
        if self.family not in _RAW_KERNELS:
            raise ConfigError(f"Unknown kernel {self.family!r}; expected one of {sorted(_RAW_KERNELS)}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError(f"Bandwidth must be positive, got {self.bandwidth}")

    @property
    def support(self):
        return 1.0 / np.sqrt(_RAW_KERNELS[self.family][1])

    def __call__(self, t):
        raw, _ = _RAW_KERNELS[self.family]
        s = self.support
        u = np.asarray(t, dtype=float) / s
        return np.where(np.abs(u) <= 1.0, raw(np.clip(u, -1.0, 1.0)), 0.0) / s

    def weights(self, z, target, bandwidth=None):
        """K_h(z - target) = K((z - target) / h) / h."""
        h = self.bandwidth if bandwidth is None else bandwidth
        return self((np.asarray(z, dtype=float) - target) / h) / h

    def moments(self):
        """(int K, int t K, int t^2 K) by adaptive quadrature."""
        s = self.support
        return tuple(integrate.quad(lambda t, k=k: t ** k * self(t), -s, s, epsabs=1e-13, epsrel=1e-13)[0]
                     for k in range(3))

    def with_bandwidth(self, bandwidth):
        return KernelSpec(family=self.family, bandwidth=float(bandwidth))


def default_bandwidth(z):
    """h = 1.2 * SD(Z) * n^(-1/3), inside the n^(-1/2) << h << n^(-1/4) window."""
    z = np.asarray(z, dtype=float)
    return 1.2 * float(np.std(z, ddof=1)) * z.size ** (-1.0 / 3.0)


def check_bandwidth(z, bandwidth):
    """Warn when h / SD(Z) is outside [n^(-1/2), n^(-1/4)]."""
    z = np.asarray(z, dtype=float)
    n, scaled = z.size, bandwidth / float(np.std(z, ddof=1))
    inside = n ** -0.5 < scaled < n ** -0.25
    if not inside:
        logger.warning(f"Bandwidth {bandwidth:.4g} is outside the recommended window for n={n} "
                       f"(h/SD(Z)={scaled:.3g}, expected between {n ** -0.5:.3g} and {n ** -0.25:.3g})")
    return inside


@dataclass
class ThetaProfile:
    """theta_hat_i(beta) at every observation and d theta_hat_i / d beta_j on the active coordinates."""

    theta: np.ndarray
    dtheta_dbeta: np.ndarray = None
    coords: tuple = ()
    targets: np.ndarray = None
    bandwidths: np.ndarray = None
    fallbacks: int = 0
    theta_targets: np.ndarray = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.theta)):
            raise NonConvergenceError("Profiled theta contains non-finite values")


def partition_score(full_score, m):
    """
    Split an efficient score of length d + m into (L, Psi) along the last axis.

    Args:
        full_score (ndarray): (..., d + m)
        m (int): Number of nuisance components

    Returns:
        tuple: (L of length d, Psi of length m)
    """
    full_score = np.asarray(full_score, dtype=float)
    if not 0 <= m <= full_score.shape[-1]:
        raise ConfigError(f"Cannot take {m} nuisance components from a score of length {full_score.shape[-1]}")
    d = full_score.shape[-1] - m
    return full_score[..., :d], full_score[..., d:]


class SemiparametricProfiler:
    """Kernel profiling of theta(Z) and the profiled penalized solve for one model and dataset."""

    def __init__(self, model, data, kernel=None, config=None, engine=None, theta_grid=None,
                 sensitivity="difference"):
        if not data.semiparametric:
            raise ConfigError("Semiparametric fits need a dataset with a scalar index z")
        if sensitivity not in SENSITIVITY_METHODS:
            raise ConfigError(f"Unknown sensitivity method {sensitivity!r}; expected one of {SENSITIVITY_METHODS}")
        self.sensitivity = sensitivity
        self.model = model
        self.data = data
        self.config = config or SolverConfig()
        self.engine = engine or ScoreEngine(model, posterior=self.config.posterior)
        kernel = kernel or KernelSpec()
        if kernel.bandwidth is None:
            kernel = kernel.with_bandwidth(default_bandwidth(data.z))
        self.kernel = kernel
        self.d, self.m = model.n_beta, model.n_theta
        self.theta_grid = theta_grid
        if theta_grid:
            self.targets = np.linspace(data.z.min(), data.z.max(), int(theta_grid))
            self._target_of = None
        else:
            self.targets, self._target_of = np.unique(data.z, return_inverse=True)
        self._theta = None
        self.bandwidths = self._target_bandwidths()

    # ------------------------------------------------------------------
    # kernel windows
    # ------------------------------------------------------------------
    def _target_bandwidths(self):
        """Per-target bandwidths, doubled locally (at most 3 times) where the window is too empty."""
        h = np.full(self.targets.size, self.kernel.bandwidth)
        need = max(self.m, 1)
        for _ in range(MAX_BANDWIDTH_DOUBLINGS + 1):
            counts = self._window_counts(h)
            short = counts < need
            if not np.any(short):
                break
            if np.all(h[short] >= self.kernel.bandwidth * 2 ** MAX_BANDWIDTH_DOUBLINGS):
                break
            h[short] *= 2.0
        counts = self._window_counts(h)
        if np.any(counts < need):
            bad = int(np.flatnonzero(counts < need)[0])
            raise EmptyWindowError(f"No observations in the kernel window at z={self.targets[bad]:.4g}",
                                   z_target=float(self.targets[bad]), bandwidth=float(h[bad]))
        n_fallback = int(np.sum(h > self.kernel.bandwidth))
        if n_fallback:
            logger.warning(f"Bandwidth doubled locally at {n_fallback} boundary target(s)")
        return h

    def _window_counts(self, h):
        return np.sum(np.abs(self.data.z[None, :] - self.targets[:, None]) < self.kernel.support * h[:, None], axis=1)

    def _kernel_matrix(self, targets, bandwidths):
        return np.stack([self.kernel.weights(self.data.z, t, b) for t, b in zip(targets, bandwidths)])

    # ------------------------------------------------------------------
    # scores with theta plugged in per row
    # ------------------------------------------------------------------
    def _params(self, beta, theta_rows):
        beta = np.asarray(beta, dtype=float)
        return np.hstack([np.broadcast_to(beta, (theta_rows.shape[0], beta.size)), theta_rows])

    def full_scores(self, beta, theta, rows=None):
        """Efficient scores (n, d + m) with theta_i plugged in for observation i."""
        rows = np.arange(self.data.n) if rows is None else rows
        d = self.data
        return self.engine.eff_score(d.w[rows], d.covariates[rows], d.y[rows], self._params(beta, theta))

    def _local_equations(self, beta, theta, K, with_jacobian=True):
        """Normalized local equations and their theta-Jacobians (None when not requested) for every target row of K."""
        C, m = theta.shape
        target_idx, obs_idx = np.nonzero(K > 0)
        weights = K[target_idx, obs_idx]
        total = np.bincount(target_idx, weights=weights, minlength=C)
        h = step_size(theta)
        shifts = [np.zeros((C, m))]
        for k in range(m if with_jacobian else 0):
            e = np.zeros((C, m))
            e[:, k] = h[:, k]
            shifts += [e, -e]
        theta_rows = np.vstack([theta[target_idx] + s[target_idx] for s in shifts])
        rows = np.tile(obs_idx, len(shifts))
        d = self.data
        scores = self.engine.eff_score(d.w[rows], d.covariates[rows], d.y[rows], self._params(beta, theta_rows))
        _, psi = partition_score(scores, m)
        psi = psi.reshape(len(shifts), target_idx.size, m)

        def weighted(block):
            out = np.zeros((C, m))
            for k in range(m):
                out[:, k] = np.bincount(target_idx, weights=weights * block[:, k], minlength=C)
            return out / total[:, None]

        R = weighted(psi[0])
        if not with_jacobian:
            return R, None
        dR = np.empty((C, m, m))
        for k in range(m):
            dR[:, :, k] = (weighted(psi[1 + 2 * k]) - weighted(psi[2 + 2 * k])) / (2.0 * h[:, k][:, None])
        return R, dR

    # ------------------------------------------------------------------
    # local solves
    # ------------------------------------------------------------------
    def _solve_targets(self, beta, targets, bandwidths, theta0):
        """Newton solve of the local kernel equations for all targets at once."""
        theta = np.array(theta0, dtype=float).reshape(targets.size, self.m)
        K = self._kernel_matrix(targets, bandwidths)
        pending = np.arange(targets.size)
        prev_theta, prev_norm = theta.copy(), np.full(targets.size, np.inf)
        for iteration in range(THETA_MAX_ITER):
            R, dR = self._local_equations(beta, theta[pending], K[pending])
            norm = np.max(np.abs(R), axis=1)

            # backtrack targets whose residual grew
            worse = norm > prev_norm[pending]
            if np.any(worse):
                idx = pending[worse]
                theta[idx] = prev_theta[idx] + 0.5 * (theta[idx] - prev_theta[idx])
                keep = ~worse
            else:
                keep = np.ones(pending.size, dtype=bool)

            done = keep & (norm <= THETA_TOL)
            step_rows = keep & ~done
            idx = pending[step_rows]
            prev_theta[idx], prev_norm[idx] = theta[idx], norm[step_rows]
            if idx.size:
                try:
                    step = np.linalg.solve(dR[step_rows], -R[step_rows][..., None])[..., 0]
                except np.linalg.LinAlgError:
                    step = -np.einsum("cij,cj->ci", np.linalg.pinv(dR[step_rows]), R[step_rows])
                theta[idx] += np.clip(step, -5.0, 5.0)
            pending = pending[~done]
            if pending.size == 0:
                return theta
        raise NonConvergenceError(
            f"Local theta equations did not converge at {pending.size} target(s) in {THETA_MAX_ITER} iterations")

    def local_theta_solve(self, beta, z_target, theta0=None, bandwidth=None):
        """theta_hat(z_target; beta), an m-vector."""
        h = self.kernel.bandwidth if bandwidth is None else bandwidth
        weights = self.kernel.weights(self.data.z, z_target, h)
        if np.count_nonzero(weights > 0) < max(self.m, 1):
            raise EmptyWindowError(f"No observations in the kernel window at z={z_target:.4g}",
                                   z_target=float(z_target), bandwidth=float(h))
        start = np.zeros((1, self.m)) if theta0 is None else np.reshape(theta0, (1, self.m))
        return self._solve_targets(beta, np.array([z_target], dtype=float), np.array([h]), start)[0]

    def profile_theta(self, beta, theta_start=None):
        """theta_hat_i(beta) for every observation, warm-started from the last profile."""
        if self.m == 0:
            return np.zeros((self.data.n, 0))
        if theta_start is None:
            theta_start = self._theta if self._theta is not None else np.zeros((self.targets.size, self.m))
        at_targets = self._solve_targets(beta, self.targets, self.bandwidths, theta_start)
        self._theta = at_targets
        return self._expand(at_targets)

    def _expand(self, at_targets):
        """Per-target arrays (C, ...) mapped to observations (n, ...), interpolating in z on a target grid."""
        if self._target_of is not None:
            return at_targets[self._target_of]
        flat = at_targets.reshape(self.targets.size, -1)
        columns = [np.interp(self.data.z, self.targets, flat[:, k]) for k in range(flat.shape[1])]
        return np.column_stack(columns).reshape((self.data.n,) + at_targets.shape[1:])

    # ------------------------------------------------------------------
    # profiled estimating function
    # ------------------------------------------------------------------
    def estimating_function(self, beta, coords=None):
        theta = self.profile_theta(beta)
        L, _ = partition_score(self.full_scores(beta, theta), self.m)
        value = L.mean(axis=0)
        return value if coords is None else value[coords]

    def jacobian(self, beta, coords=None, with_sensitivity=False):
        """
        Total derivative of the profiled equation.

        With sensitivity="difference" theta is re-profiled at every perturbed beta; with
        "implicit" the derivative is the partial one at fixed theta plus E[dL/dtheta] times
        the implicit-function sensitivities.
        """
        beta = np.asarray(beta, dtype=float)
        coords = np.arange(self.d) if coords is None else np.asarray(coords, dtype=int)
        if self.sensitivity == "implicit" and self.m:
            return self._implicit_jacobian(beta, coords, with_sensitivity)
        anchor = self._theta
        jac = np.empty((coords.size, coords.size))
        sens = np.empty((self.data.n, self.m, coords.size))
        for col, j in enumerate(coords):
            h = float(step_size(beta[j]))
            values, thetas = [], []
            for sign in (1.0, -1.0):
                b = beta.copy()
                b[j] += sign * h
                theta = self.profile_theta(b, theta_start=anchor)
                L, _ = partition_score(self.full_scores(b, theta), self.m)
                values.append(L.mean(axis=0)[coords])
                thetas.append(theta)
            jac[:, col] = (values[0] - values[1]) / (2.0 * h)
            sens[:, :, col] = (thetas[0] - thetas[1]) / (2.0 * h)
        self._theta = anchor
        return (jac, sens) if with_sensitivity else jac

    def implicit_sensitivities(self, beta, coords=None):
        """
        d theta_hat / d beta^T = -(dR/dtheta)^-1 dR/dbeta from the local equations R at
        every target, mapped to observations.

        Returns:
            ndarray: (n, m, len(coords))
        """
        beta = np.asarray(beta, dtype=float)
        coords = np.arange(self.d) if coords is None else np.asarray(coords, dtype=int)
        self.profile_theta(beta)
        theta = self._theta
        K = self._kernel_matrix(self.targets, self.bandwidths)
        _, dR = self._local_equations(beta, theta, K)
        dR_beta = np.empty((self.targets.size, self.m, coords.size))
        for col, j in enumerate(coords):
            h = float(step_size(beta[j]))
            up, down = beta.copy(), beta.copy()
            up[j] += h
            down[j] -= h
            R_up, _ = self._local_equations(up, theta, K, with_jacobian=False)
            R_down, _ = self._local_equations(down, theta, K, with_jacobian=False)
            dR_beta[:, :, col] = (R_up - R_down) / (2.0 * h)
        try:
            at_targets = -np.linalg.solve(dR, dR_beta)
        except np.linalg.LinAlgError:
            raise SingularOmegaError("Local theta equations have a singular Jacobian")
        return self._expand(at_targets)

    def _implicit_jacobian(self, beta, coords, with_sensitivity):
        sens = self.implicit_sensitivities(beta, coords)
        theta = self._expand(self._theta)
        partial = np.empty((coords.size, coords.size))
        for col, j in enumerate(coords):
            h = float(step_size(beta[j]))
            up, down = beta.copy(), beta.copy()
            up[j] += h
            down[j] -= h
            L_up, _ = partition_score(self.full_scores(up, theta), self.m)
            L_down, _ = partition_score(self.full_scores(down, theta), self.m)
            partial[:, col] = (L_up.mean(axis=0)[coords] - L_down.mean(axis=0)[coords]) / (2.0 * h)
        L_theta, _ = self._theta_derivatives(beta, theta, coords)
        jac = partial + np.einsum("iam,imc->ac", L_theta, sens) / self.data.n
        return (jac, sens) if with_sensitivity else jac

    def naive_start(self):
        """Main model fitted with W in place of X; theta terms start at their naive coefficients."""
        design = self.model.design.evaluate(self.data.w[:, None], self.data.covariates)[:, 0, :]
        try:
            if self.model.main_model.binary:
                params = sm.Logit(self.data.y, design).fit(disp=0, maxiter=200).params
            else:
                params = sm.OLS(self.data.y, design).fit().params
            params = np.asarray(params, dtype=float)
            if np.all(np.isfinite(params)):
                return params[:self.d], params[self.d:]
        except (np.linalg.LinAlgError, PerfectSeparationError, ValueError) as e:
            logger.warning(f"Naive initial fit failed: {e}")
        return np.zeros(self.d), np.zeros(self.m)

    def _newton(self, beta0, penalty):
        def run(start):
            return newton_lqa(self.estimating_function, self.jacobian, start, penalty, self.config,
                              mask=self.config.unpenalized)

        if penalty is None:
            return with_restarts(run, np.asarray(beta0, dtype=float), self.config, label="Profiled unpenalized fit")
        try:
            return run(beta0)
        except NonConvergenceError as e:
            logger.warning("Profiled Newton iteration did not converge")
            return e.best

    def fit(self, lam=0.0, penalty=None, start=None, sensitivities=True):
        """
        Profiled (penalized) fit.

        Args:
            lam (float): Regularization parameter; 0 gives the unpenalized estimating-equation fit
            penalty (PenaltySpec): Penalty family and shape
            start (FitResult): Unpenalized profiled fit used as the starting value
            sensitivities (bool): Also compute d theta_hat / d beta on the active set

        Returns:
            tuple: (FitResult, ThetaProfile)
        """
        check_bandwidth(self.data.z, self.kernel.bandwidth)
        penalty = (penalty or PenaltySpec()).with_lambda(lam)
        if start is None:
            beta0, theta0 = self.naive_start()
            if self.m:
                self._theta = np.broadcast_to(theta0, (self.targets.size, self.m)).copy()
            unpen = self._newton(beta0, None)
        else:
            unpen = start
        if penalty.lam == 0:
            fit = replace(unpen, penalty=penalty, trace=list(unpen.trace))
        else:
            fit = self._newton(unpen.beta_hat, penalty)
        fit.term_names = tuple(self.model.terms)
        theta = self.profile_theta(fit.beta_hat)
        sens, coords = None, fit.active_set
        if sensitivities and coords and self.m:
            _, sens = self.jacobian(fit.beta_hat, coords, with_sensitivity=True)
        profile = ThetaProfile(theta=theta, dtheta_dbeta=sens, coords=tuple(coords), targets=self.targets,
                               bandwidths=self.bandwidths,
                               fallbacks=int(np.sum(self.bandwidths > self.kernel.bandwidth)),
                               theta_targets=None if self._theta is None else self._theta.copy())
        logger.info(f"Profiled fit at lambda={lam:.4g}: {fit.n_active} active, converged={fit.converged}")
        return fit, profile

    # ------------------------------------------------------------------
    # sandwich
    # ------------------------------------------------------------------
    def sandwich_cov(self, fit, profile):
        """(1/n) (A - Sigma)^-1 B (A - Sigma)^-T on the active set."""
        if not fit.active_set:
            raise SingularBreadError("Sandwich covariance needs a nonempty active set")
        active = np.asarray(fit.active_set)
        beta, theta = fit.beta_hat, profile.theta
        if profile.theta_targets is not None and profile.theta_targets.shape == (self.targets.size, self.m):
            self._theta = profile.theta_targets.copy()
        A = self.jacobian(beta, active)

        scores = self.full_scores(beta, theta)
        L, psi = partition_score(scores, self.m)
        L = L[:, active]
        influence = L
        if self.m:
            L_theta, psi_theta = self._theta_derivatives(beta, theta, active)
            K = self._kernel_matrix(self.data.z, np.full(self.data.n, self.kernel.bandwidth))
            K = K / K.sum(axis=1, keepdims=True)
            omega = np.einsum("ik,kab->iab", K, psi_theta)
            E_L_theta = np.einsum("ik,kab->iab", K, L_theta)
            cond = np.linalg.cond(omega)
            if np.any(~np.isfinite(cond) | (cond > 1e12)):
                raise SingularOmegaError("Kernel estimate of E(dPsi/dtheta | Z) is singular")
            U = np.einsum("iab,ibc->iac", E_L_theta, np.linalg.inv(omega))
            influence = L - np.einsum("iab,ib->ia", U, psi)
        B = influence.T @ influence / self.data.n

        sigma = np.zeros(active.size)
        if fit.penalty is not None and fit.penalty.lam > 0:
            threshold = self.config.zero_threshold or default_zero_threshold(beta)
            weights, _ = lqa_weights(beta, fit.penalty, threshold, self.config.unpenalized)
            sigma = weights[active]
        return sandwich(A, B, sigma, self.data.n)

    def _theta_derivatives(self, beta, theta, active):
        """Per-observation dL_I/dtheta (n, |I|, m) and dPsi/dtheta (n, m, m) at (beta, theta_hat_i)."""
        n, m = theta.shape
        L_theta = np.empty((n, active.size, m))
        psi_theta = np.empty((n, m, m))
        for k in range(m):
            h = step_size(theta[:, k])
            up, down = theta.copy(), theta.copy()
            up[:, k] += h
            down[:, k] -= h
            L_up, psi_up = partition_score(self.full_scores(beta, up), m)
            L_dn, psi_dn = partition_score(self.full_scores(beta, down), m)
            L_theta[:, :, k] = (L_up[:, active] - L_dn[:, active]) / (2.0 * h[:, None])
            psi_theta[:, :, k] = (psi_up - psi_dn) / (2.0 * h[:, None])
        return L_theta, psi_theta


# ----------------------------------------------------------------------
# Functional interface
# ----------------------------------------------------------------------
def local_theta_solve(data, beta, z_target, kernel, model, config=None, theta0=None):
    profiler = SemiparametricProfiler(model, data, kernel, config)
    return profiler.local_theta_solve(beta, z_target, theta0=theta0)


def profile_fit(model, data, lam, penalty=None, kernel=None, config=None, start=None, theta_grid=None,
                sensitivity="difference"):
    profiler = SemiparametricProfiler(model, data, kernel, config, theta_grid=theta_grid, sensitivity=sensitivity)
    return profiler.fit(lam, penalty, start)


def semipar_sandwich(fit, profile, model, data, kernel=None, config=None):
    profiler = SemiparametricProfiler(model, data, kernel, config)
    return profiler.sandwich_cov(fit, profile)
