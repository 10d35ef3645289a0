"""
Locally efficient score for a parametric measurement-error model.

    S*_beta(W,Z,Y) = d/dbeta log  int p(W|X) p(Y|X,Z;beta) p*(X) dX
    S*_eff         = S*_beta - E*{ a(X,Z) | W,Z,Y }

where a(., Z) solves the linear integral equation

    E[ E*{a(X,Z) | W,Z,Y} | X, Z ] = E{ S*_beta(W,Z,Y) | X, Z }.

E* is the posterior expectation of X given (W,Z,Y) under the posited p*, the outer
E is over (W,Y) given X under the true error and main models.

Discretization
--------------
a(., Z) is represented by its values on the X grid (natural cubic spline between nodes,
constant beyond the end nodes) and the equation is collocated at the grid nodes,
giving a G x G system per conditioning value.

Writing eta = sum_p X^p b_p(Z) with b_p collecting every term of X-power p, the
kernel depends on Z only through b = (b_p), and the column of a for a term with
covariate part c_k(Z) and X-power p is c_k(Z) times the solution for the
right-hand side X^p. Systems are therefore solved once per distinct b, one column
per X-power. When only the offset b_0 varies between observations (the usual case
for continuous covariates or a profiled theta(Z)), solutions are computed on a
fixed lattice of offsets and interpolated with four-point Lagrange weights.

E* is a weighted sum over posterior nodes of X given W. Two rules are available:
  - "adaptive" (default): nodes follow p(W|X) p*(X); for a normal posited law this is a
    Gauss-Hermite rule on the normal posterior of X given W, otherwise a Hermite rule
    centred at W weighted by p*. Accuracy does not depend on the X grid spacing.
  - "grid": the posterior nodes are the X grid nodes with weights pi_g p(W|x_g), the
    plain discretization of dmu(X). With G = 1 every expectation collapses to the node.
"""

import hashlib
import logging
import threading
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp

import settings
from errors import ConfigError, DegenerateLikelihoodError, SingularKernelError
from me_models import TermDesign, _hermite_rule, as_rows

logger = logging.getLogger(__name__)

POSTERIOR_RULES = ("adaptive", "grid")
RIDGE_STEPS = (1e-10, 1e-8, 1e-6)
CONDITION_LIMIT = 1e12
RESIDUAL_TOL = 1e-8
# offsets closer than this many distinct values are solved exactly
EXACT_OFFSET_LIMIT = 64
OFFSET_SPACING = 0.025
_CHUNK_ELEMENTS = 4_000_000
_ROW_CHUNK = 10_000
_CACHE_LIMIT = 50_000
_STENCIL = np.arange(-1, 3)


@dataclass
class AFunction:
    """
    Solution of the integral equation: values[u, g, j] = a_j(x_g) for solve row u.

    `inverse` maps each observation to its solve row. When `columns` is set the
    values are per X-power and a_k(x) for observation i is
    scale[i, k] * values[inverse[i], :, columns[k]]; otherwise values already hold
    one column per parameter. `ridge` and `residual` are per solve row.
    """

    nodes: np.ndarray
    values: np.ndarray
    inverse: np.ndarray
    ridge: np.ndarray
    residual: np.ndarray
    scale: np.ndarray = None
    columns: np.ndarray = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise SingularKernelError("Integral equation solution contains non-finite entries")

    def at(self, x, rows):
        """Interpolate a(x) for observations `rows` at points x of shape (n, Q); returns (n, Q, d)."""
        basis = spline_basis(x, self.nodes)
        out = np.einsum("iqg,igp->iqp", basis, self.values[self.inverse[rows]])
        if self.columns is None:
            return out
        return out[..., self.columns] * self.scale[rows][:, None, :]

    def dense(self):
        """a on the X grid for every observation, shape (n, G, d)."""
        values = self.values[self.inverse]
        if self.columns is None:
            return values
        return values[..., self.columns] * self.scale[:, None, :]


def hat_basis(x, nodes):
    """Piecewise-linear interpolation weights of points x on nodes, shape x.shape + (G,)."""
    x = np.asarray(x, dtype=float)
    G = nodes.size
    out = np.zeros(x.shape + (G,))
    if G == 1:
        out[...] = 1.0
        return out
    xc = np.clip(x, nodes[0], nodes[-1])
    right = np.clip(np.searchsorted(nodes, xc, side="right"), 1, G - 1)
    left = right - 1
    span = nodes[right] - nodes[left]
    frac = (xc - nodes[left]) / span
    np.put_along_axis(out, left[..., None], (1.0 - frac)[..., None], axis=-1)
    # add, since left and right never coincide
    idx = right[..., None]
    np.put_along_axis(out, idx, np.take_along_axis(out, idx, axis=-1) + frac[..., None], axis=-1)
    return out


def spline_basis(x, nodes):
    """
    Natural cubic spline interpolation weights of points x on nodes, shape x.shape + (G,).

    Points beyond the end nodes take the end value. Grids of three nodes or fewer
    fall back to the piecewise-linear hat basis.
    """
    if nodes.size <= 3:
        return hat_basis(x, nodes)
    x = np.asarray(x, dtype=float)
    spline = CubicSpline(nodes, np.eye(nodes.size), bc_type="natural")
    return spline(np.clip(x, nodes[0], nodes[-1]))


def lagrange_weights(u):
    """Four-point Lagrange weights at nodes -1, 0, 1, 2 for fractional positions u in [0, 1)."""
    u = np.asarray(u, dtype=float)[..., None]
    return np.concatenate([
        -u * (u - 1.0) * (u - 2.0) / 6.0,
        (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0,
        -(u + 1.0) * u * (u - 2.0) / 2.0,
        (u + 1.0) * u * (u - 1.0) / 6.0,
    ], axis=-1)


def _digest(values):
    return hashlib.sha1(np.ascontiguousarray(values, dtype=float).tobytes()).hexdigest()


def _power_term(power, name):
    if power == 0:
        return "1"
    return name if power == 1 else f"{name}^{power}"


class ScoreEngine:
    """
    Evaluates purported and efficient scores for one MEModelSpec.

    Parameters may be a single vector (d,) or one vector per observation (n, d); the
    latter lets the semiparametric profiler plug a different theta into every row.
    """

    def __init__(self, model, posterior="adaptive", x_quad_size=None):
        if posterior not in POSTERIOR_RULES:
            raise ConfigError(f"Unknown posterior rule {posterior!r}; expected one of {POSTERIOR_RULES}")
        self.model = model
        self.posterior = posterior
        self.grid = model.x_grid
        self.error = model.error_model
        self.main = model.main_model
        if posterior == "grid" and self.error.error_free:
            raise ConfigError("The 'grid' posterior rule needs a positive measurement error SD")

        self.x_quad_size = int(x_quad_size or settings.W_QUAD_SIZE)
        self._t, self._v = _hermite_rule(self.x_quad_size)
        self._cache = {}
        self._lock = threading.Lock()

        powers = model.design.x_powers
        self._powers = np.unique(powers)
        self._power_index = np.searchsorted(self._powers, powers)
        self._power_onehot = np.eye(self._powers.size)[self._power_index]              # (d, J)
        self._reduced = TermDesign(tuple(_power_term(int(p), model.error_prone) for p in self._powers),
                                   (), model.error_prone)
        self._offset_col = 0 if self._powers[0] == 0 else None
        self._setup_collocation()

    # ------------------------------------------------------------------
    # quadrature pieces that do not depend on beta or Z
    # ------------------------------------------------------------------
    def _posterior_nodes(self, w):
        """
        Posterior quadrature for X given W (before the main-model factor).

        Returns:
            tuple: nodes of shape w.shape + (Q,) and log weights of the same shape
        """
        w = np.asarray(w, dtype=float)
        if self.error.error_free:
            return w[..., None], np.zeros(w.shape + (1,))

        if self.posterior == "grid":
            nodes = np.broadcast_to(self.grid.nodes, w.shape + (self.grid.size,))
            logw = self.grid.log_weights + self.error.log_density(w[..., None], self.grid.nodes)
            return nodes, logw

        sigma2 = self.error.sigma_u ** 2
        if self.model.posited.is_normal:
            mu, tau2 = float(self.model.posited.dist.mean()), float(self.model.posited.dist.var())
            v = 1.0 / (1.0 / sigma2 + 1.0 / tau2)
            m = v * (w / sigma2 + mu / tau2)
            nodes = m[..., None] + np.sqrt(v) * self._t
            logw = np.broadcast_to(np.log(self._v), nodes.shape)
            return nodes, logw

        nodes = w[..., None] + self.error.sigma_u * self._t
        with np.errstate(divide="ignore"):
            logw = np.log(self._v) + self.model.posited.dist.logpdf(nodes)
        return nodes, logw

    def _setup_collocation(self):
        xg = self.grid.nodes
        if self.error.error_free:
            w_nodes, v = xg[:, None], np.ones(1)
        else:
            w_nodes, v = self.error.nodes(xg)
        self._w_nodes = w_nodes                                  # (G, K)
        self._log_v = np.log(v)                                  # (K,)
        self._coll_x, self._coll_logw = self._posterior_nodes(w_nodes)   # (G, K, Q)
        self._coll_basis = spline_basis(self._coll_x, xg)        # (G, K, Q, G)

    # ------------------------------------------------------------------
    # observation level
    # ------------------------------------------------------------------
    def _posterior(self, w, covariates, y, params):
        """Posterior weights over X nodes for each observation plus per-node complete-data scores."""
        x, logw = self._posterior_nodes(w)
        x = np.ascontiguousarray(x)
        design = self.model.design.evaluate(x, covariates)                  # (n, Q, d)
        eta = _apply(design, params)                                         # (n, Q)
        log_joint = logw + self.main.log_density(y[:, None], eta)
        log_norm = logsumexp(log_joint, axis=1)
        bad = ~np.isfinite(log_norm)
        if np.any(bad):
            index = int(np.flatnonzero(bad)[0])
            raise DegenerateLikelihoodError(
                f"Observed-data likelihood underflows for observation {index}", index=index)
        omega = np.exp(log_joint - log_norm[:, None])
        scores = self.main.score_factor(y[:, None], eta)[..., None] * design  # (n, Q, d)
        return x, omega, scores

    def purported_score(self, w, covariates, y, params):
        """S*_beta for each observation, shape (n, d)."""
        w, covariates, y, params = self._prepare(w, covariates, y, params)

        def block(w, covariates, y, params):
            _, omega, scores = self._posterior(w, covariates, y, params)
            return np.einsum("iq,iqp->ip", omega, scores)

        return _by_chunks(block, w, covariates, y, params)

    def eff_score_given(self, a, w, covariates, y, params):
        """S*_eff using an already solved AFunction (one conditioning row per observation)."""
        w, covariates, y, params = self._prepare(w, covariates, y, params)
        x, omega, scores = self._posterior(w, covariates, y, params)
        s_star = np.einsum("iq,iqp->ip", omega, scores)
        correction = np.einsum("iq,iqp->ip", omega, a.at(x, np.arange(w.size)))
        return s_star - correction

    def eff_score(self, w, covariates, y, params):
        """S*_eff for every observation, solving a(.) per distinct conditioning value."""
        w, covariates, y, params = self._prepare(w, covariates, y, params)

        def block(w, covariates, y, params):
            a = self.solve_a(covariates, params)
            return self.eff_score_given(a, w, covariates, y, params)

        return _by_chunks(block, w, covariates, y, params)

    def mean_eff_score(self, w, covariates, y, params):
        return self.eff_score(w, covariates, y, params).mean(axis=0)

    # ------------------------------------------------------------------
    # integral equation
    # ------------------------------------------------------------------
    def reduced_coefficients(self, covariates, params):
        """b_p(Z) = sum of params_k * c_k(Z) over the terms of X-power p, shape (n, J)."""
        covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
        scale = self.model.design.covariate_part(covariates)
        params = np.asarray(params, dtype=float)
        if params.shape[-1] != self.model.n_params:
            raise ConfigError(f"Expected {self.model.n_params} parameters, got {params.shape[-1]}")
        return scale, (scale * params) @ self._power_onehot

    def solve_a(self, covariates, params):
        """
        Solve the collocated integral equation for every observation.

        Args:
            covariates (ndarray): (n, q) error-free covariates
            params (ndarray): (d,) or (n, d)

        Returns:
            AFunction
        """
        scale, coef = self.reduced_coefficients(covariates, params)
        if self._on_lattice(coef):
            values, inverse, ridge, residual = self._solve_lattice(coef)
        else:
            unique, inverse = np.unique(coef, axis=0, return_inverse=True)
            keys = [("exact", _digest(row)) for row in unique]
            values, ridge, residual = self._cached_solve(keys, unique)
            inverse = inverse.ravel()
        return AFunction(nodes=self.grid.nodes, values=values, inverse=inverse, ridge=ridge,
                         residual=residual, scale=scale, columns=self._power_index)

    def _on_lattice(self, coef):
        if self._offset_col is None or coef.shape[0] <= EXACT_OFFSET_LIMIT:
            return False
        rest = np.delete(coef, self._offset_col, axis=1)
        if np.any(rest != rest[:1]):
            return False
        return np.unique(coef[:, self._offset_col]).size > EXACT_OFFSET_LIMIT

    def _solve_lattice(self, coef):
        """Offsets interpolated from solves at multiples of OFFSET_SPACING, other coefficients shared."""
        c0 = self._offset_col
        offsets, inverse = np.unique(coef[:, c0], return_inverse=True)
        t = offsets / OFFSET_SPACING
        base = np.floor(t)
        frac = t - base
        base = base.astype(np.int64)
        ks = np.arange(base.min() - 1, base.max() + 3)
        node_coef = np.repeat(coef[:1], ks.size, axis=0)
        node_coef[:, c0] = ks * OFFSET_SPACING
        shared = _digest(np.delete(coef[0], c0))
        keys = [("lattice", shared, int(k)) for k in ks]
        node_values, node_ridge, node_residual = self._cached_solve(keys, node_coef)

        idx = base[:, None] + _STENCIL - ks[0]
        values = np.einsum("us,usgj->ugj", lagrange_weights(frac), node_values[idx])
        return values, inverse.ravel(), node_ridge[idx].max(axis=1), node_residual[idx].max(axis=1)

    def _cached_solve(self, keys, coef):
        """Solutions (U, G, J) for reduced coefficient rows, reusing cached rows by key."""
        U, J = coef.shape
        G = self.grid.size
        values = np.empty((U, G, J))
        ridge = np.zeros(U)
        residual = np.zeros(U)
        todo = []
        with self._lock:
            for u, key in enumerate(keys):
                hit = self._cache.get(key)
                if hit is None:
                    todo.append(u)
                else:
                    values[u], ridge[u], residual[u] = hit
        if not todo:
            return values, ridge, residual

        todo = np.asarray(todo, dtype=int)
        n_y = getattr(self.main, "y_quad_size", 2)
        per_u = G * self._w_nodes.shape[1] * self._coll_x.shape[-1] * max(J, n_y)
        chunk = max(1, _CHUNK_ELEMENTS // per_u)
        for start in range(0, todo.size, chunk):
            rows = todo[start:start + chunk]
            M, r = self._assemble(coef[rows])
            values[rows], ridge[rows], residual[rows] = self._solve(M, r)
        with self._lock:
            if len(self._cache) + todo.size > _CACHE_LIMIT:
                self._cache.clear()
            for u in todo:
                self._cache[keys[u]] = (values[u].copy(), ridge[u], residual[u])

        if np.any(ridge[todo] > 0):
            logger.warning(f"Integral equation needed ridge regularization for {int(np.sum(ridge[todo] > 0))} "
                           f"conditioning value(s); largest factor {ridge[todo].max():.1e}")
        return values, ridge, residual

    def _assemble(self, coef):
        """Kernel matrices M (U, G, G) and right-hand sides r (U, G, J) for reduced coefficient rows."""
        U = coef.shape[0]
        xg = self.grid.nodes
        G = xg.size
        empty = np.zeros((U, 0))
        # eta at the collocation nodes, used for the Y law given X = x_j
        design_j = self._reduced.evaluate(np.broadcast_to(xg, (U, G)), empty)            # (U, G, J)
        eta_j = _apply(design_j, coef)                                                  # (U, G)
        y_vals, y_logw = self.main.y_nodes(eta_j)                                       # (U, G, L)

        coll_x = np.broadcast_to(self._coll_x, (U,) + self._coll_x.shape)               # (U, G, K, Q)
        design_q = self._reduced.evaluate(np.ascontiguousarray(coll_x), empty)          # (U, G, K, Q, J)
        eta_q = _apply(design_q, coef)                                                  # (U, G, K, Q)

        y5 = y_vals[:, :, None, :, None]                                                # (U, G, 1, L, 1)
        e5 = eta_q[:, :, :, None, :]                                                    # (U, G, K, 1, Q)
        log_joint = self._coll_logw[None, :, :, None, :] + self.main.log_density(y5, e5)  # (U, G, K, L, Q)
        omega = np.exp(log_joint - logsumexp(log_joint, axis=-1, keepdims=True))
        outer = np.exp(self._log_v[None, None, :, None] + y_logw[:, :, None, :])        # (U, G, K, L)
        factor = self.main.score_factor(y5, e5)                                         # (U, G, K, L, Q)

        M = np.einsum("ujklq,ujkl,jkqg->ujg", omega, outer, self._coll_basis)
        r = np.einsum("ujklq,ujkl,ujklq,ujkqp->ujp", omega, outer, factor, design_q)
        return M, r

    def _solve(self, M, r):
        U, G, _ = M.shape
        values = np.full(r.shape, np.nan)
        ridge = np.zeros(U)
        residual = np.full(U, np.inf)
        pending = np.arange(U)
        scales = np.trace(M, axis1=1, axis2=2) / G
        for delta in (0.0,) + RIDGE_STEPS:
            if pending.size == 0:
                break
            Md = M[pending] + delta * scales[pending, None, None] * np.eye(G)
            cond = np.linalg.cond(Md)
            ok = np.isfinite(cond) & (cond < CONDITION_LIMIT)
            if not np.any(ok):
                continue
            rows = pending[ok]
            sol = np.linalg.solve(Md[ok], r[rows])
            res = np.max(np.abs(np.einsum("ugh,uhp->ugp", Md[ok], sol) - r[rows]), axis=(1, 2))
            rnorm = np.maximum(np.max(np.abs(r[rows]), axis=(1, 2)), 1e-300)
            good = res <= RESIDUAL_TOL * rnorm + 1e-14
            done = rows[good]
            values[done] = sol[good]
            ridge[done] = delta
            residual[done] = res[good] / rnorm[good]
            pending = np.setdiff1d(pending, done)
        if pending.size:
            worst = float(np.max(np.linalg.cond(M[pending])))
            raise SingularKernelError(
                f"Integral equation kernel is singular for {pending.size} conditioning value(s) "
                f"(condition estimate {worst:.3e})", condition=worst)
        return values, ridge, residual

    # ------------------------------------------------------------------
    # derivatives
    # ------------------------------------------------------------------
    def jacobian(self, w, covariates, y, params, coords=None, rows=None):
        """
        (1/n) sum_i dS*_eff(obs_i)/dbeta^T by central differences, re-solving a at every
        perturbed beta. Columns are restricted to `coords`, score rows to `rows`.
        """
        w, covariates, y, params = self._prepare(w, covariates, y, params)
        d = params.shape[-1]
        coords = np.arange(d) if coords is None else np.asarray(coords, dtype=int)
        rows = np.arange(d) if rows is None else np.asarray(rows, dtype=int)
        jac = np.empty((rows.size, coords.size))
        for col, j in enumerate(coords):
            h = float(step_size(np.max(np.abs(params[..., j]))))
            up, down = params.copy(), params.copy()
            up[..., j] += h
            down[..., j] -= h
            diff = self.mean_eff_score(w, covariates, y, up) - self.mean_eff_score(w, covariates, y, down)
            jac[:, col] = diff[rows] / (2.0 * h)
        return jac

    def clear_cache(self):
        with self._lock:
            self._cache.clear()

    def _prepare(self, w, covariates, y, params):
        w = np.atleast_1d(np.asarray(w, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        covariates = as_rows(covariates, w.size)
        params = np.asarray(params, dtype=float)
        if params.shape[-1] != self.model.n_params:
            raise ConfigError(f"Expected {self.model.n_params} parameters, got {params.shape[-1]}")
        if not np.all(np.isfinite(params)):
            raise ConfigError("Parameters must be finite")
        return w, covariates, y, params


def step_size(value):
    """Central-difference step cbrt(eps) * max(1, |value|)."""
    return np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(value))


def _apply(design, params):
    """Linear predictor for a design with leading observation axis and shared or per-row params."""
    if params.ndim == 1:
        return design @ params
    extra = (1,) * (design.ndim - 2)
    return np.sum(design * params.reshape((params.shape[0],) + extra + (params.shape[1],)), axis=-1)


def _by_chunks(block, w, covariates, y, params):
    """Apply a per-observation score function over row blocks of at most _ROW_CHUNK."""
    if w.size <= _ROW_CHUNK:
        return block(w, covariates, y, params)
    parts = []
    for start in range(0, w.size, _ROW_CHUNK):
        rows = slice(start, start + _ROW_CHUNK)
        parts.append(block(w[rows], covariates[rows], y[rows], params[rows] if params.ndim == 2 else params))
    return np.vstack(parts)


# ----------------------------------------------------------------------
# Functional interface, one observation or one dataset at a time
# ----------------------------------------------------------------------
def purported_score(obs, beta, model, engine=None):
    """
    Purported score of one observation.

    Args:
        obs (tuple): (w, z, y) with z the error-free covariate row
        beta (ndarray): Parameter vector
        model (MEModelSpec): Model specification

    Returns:
        ndarray: S*_beta, shape (d,)
    """
    engine = engine or ScoreEngine(model)
    w, z, y = obs
    return engine.purported_score([w], np.atleast_2d(z), [y], beta)[0]


def solve_a_function(conditioning, beta, model, engine=None):
    """Solve a(., z) on the X grid for one conditioning value z."""
    engine = engine or ScoreEngine(model)
    return engine.solve_a(np.atleast_2d(np.asarray(conditioning, dtype=float)), beta)


def eff_score(obs, beta, model, a, engine=None):
    """Efficient score of one observation with a solved at its conditioning value."""
    engine = engine or ScoreEngine(model)
    w, z, y = obs
    return engine.eff_score_given(a, [w], np.atleast_2d(z), [y], beta)[0]


def eff_score_jacobian(data, beta, model, engine=None, coords=None):
    """Average Jacobian of the efficient score over a Dataset."""
    engine = engine or ScoreEngine(model)
    return engine.jacobian(data.w, data.covariates, data.y, beta, coords=coords)
