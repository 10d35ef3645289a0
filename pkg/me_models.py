"""
Building blocks of a measurement-error model specification.

A model couples
  - a main model p(Y | X, Z; beta) with linear predictor eta = D(X, Z) . beta,
  - a known error model p(W | X) (normal additive, W = X + U),
  - a posited working law p*(X) for the unobserved covariate,
  - the X grid and W/Y quadrature used to discretize every integral.

The design D is described by a term list ("1", "x", "x^2", "x*z1", ...) so the
same machinery serves the simulation designs, the named registry models and
user analyses from CSV.
"""

import logging
import re
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit, log_expit

import settings
from errors import ConfigError

logger = logging.getLogger(__name__)

_FACTOR = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*|1)(?:\^(\d+))?$")


def _hermite_rule(size):
    """Probabilists' Gauss-Hermite rule: nodes t and weights summing to one for N(0, 1)."""
    t, w = np.polynomial.hermite.hermgauss(size)
    return t * np.sqrt(2.0), w / np.sqrt(np.pi)


def as_rows(values, n_rows):
    """Reshape to (n_rows, k); empty input gives (n_rows, 0)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return np.zeros((n_rows, 0))
    return values.reshape(n_rows, -1)


class TermDesign:
    """
    Design vector built from products and powers of named variables.

    The error-prone variable is addressed by `error_prone` (default "x"); every other
    factor must be a covariate name. "1" is the constant term.
    """

    def __init__(self, terms, covariate_names=(), error_prone="x"):
        self.terms = tuple(str(t).replace(" ", "") for t in terms)
        self.covariate_names = tuple(covariate_names)
        self.error_prone = error_prone
        if not self.terms:
            raise ConfigError("The term list is empty")
        if error_prone in self.covariate_names:
            raise ConfigError(f"Error-prone name {error_prone!r} clashes with a covariate name")
        self._parsed = [self._parse(t) for t in self.terms]

    def _parse(self, term):
        factors = []
        for piece in term.split("*"):
            match = _FACTOR.match(piece)
            if not match:
                raise ConfigError(f"Cannot parse term {term!r}")
            name, power = match.group(1), int(match.group(2) or 1)
            if name == "1":
                continue
            if name == self.error_prone:
                factors.append((None, power))
            elif name in self.covariate_names:
                factors.append((self.covariate_names.index(name), power))
            else:
                raise ConfigError(f"Term {term!r} references undeclared variable {name!r}")
        return factors

    @property
    def n_terms(self):
        return len(self.terms)

    @property
    def x_terms(self):
        """Boolean mask of terms that involve the error-prone variable."""
        return np.array([any(idx is None for idx, _ in factors) for factors in self._parsed])

    @property
    def x_powers(self):
        """Power of the error-prone variable in every term (0 for terms free of it)."""
        return np.array([sum(power for idx, power in factors if idx is None) for factors in self._parsed])

    def covariate_part(self, covariates):
        """Each term with its error-prone factor set to one, shape (B, d)."""
        covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
        n_obs = covariates.shape[0]
        return self.evaluate(np.ones((n_obs, 1)), covariates)[:, 0, :]

    def evaluate(self, x, covariates):
        """
        Evaluate the design.

        Args:
            x (ndarray): Error-prone values with leading observation axis, shape (B, ...)
            covariates (ndarray): Error-free covariates, shape (B, q)

        Returns:
            ndarray: Design values of shape (B, ..., d)
        """
        x = np.asarray(x, dtype=float)
        n_obs = x.shape[0]
        covariates = as_rows(covariates, n_obs)
        extra = (1,) * (x.ndim - 1)
        columns = []
        for factors in self._parsed:
            col = np.ones_like(x)
            for idx, power in factors:
                base = x if idx is None else covariates[:, idx].reshape((n_obs,) + extra)
                col = col * base ** power
            columns.append(col)
        return np.stack(columns, axis=-1)

    def __repr__(self):
        return f"TermDesign({list(self.terms)})"


class LogisticMainModel:
    """Binary response with logit link; Y integrals are exact two-point sums."""

    name = "logistic"
    binary = True

    def log_density(self, y, eta):
        return y * log_expit(eta) + (1.0 - y) * log_expit(-eta)

    def score_factor(self, y, eta):
        # d log p / d eta
        return y - expit(eta)

    def y_nodes(self, eta):
        """Support points and log-probabilities of Y given eta, trailing axis of length 2."""
        eta = np.asarray(eta, dtype=float)
        values = np.broadcast_to(np.array([0.0, 1.0]), eta.shape + (2,))
        log_weights = np.stack([log_expit(-eta), log_expit(eta)], axis=-1)
        return values, log_weights

    def mean(self, eta):
        return expit(eta)

    def mean_derivative(self, eta):
        mu = expit(eta)
        return mu * (1.0 - mu)

    def information_weight(self, eta):
        mu = expit(eta)
        return mu * (1.0 - mu)

    def sample(self, eta, rng):
        return (rng.uniform(size=np.shape(eta)) < expit(eta)).astype(float)


class LinearNormalMainModel:
    """Gaussian response with identity link and known residual SD; Y integrals use Hermite nodes."""

    name = "linear_normal"
    binary = False

    def __init__(self, sigma=1.0, y_quad_size=10):
        if not sigma > 0:
            raise ConfigError(f"Residual SD must be positive, got {sigma}")
        self.sigma = float(sigma)
        self.y_quad_size = int(y_quad_size)
        self._t, self._w = _hermite_rule(self.y_quad_size)

    def log_density(self, y, eta):
        return stats.norm.logpdf(y, loc=eta, scale=self.sigma)

    def score_factor(self, y, eta):
        return (y - eta) / self.sigma ** 2

    def y_nodes(self, eta):
        eta = np.asarray(eta, dtype=float)
        values = eta[..., None] + self.sigma * self._t
        log_weights = np.broadcast_to(np.log(self._w), values.shape)
        return values, log_weights

    def mean(self, eta):
        return np.asarray(eta, dtype=float)

    def mean_derivative(self, eta):
        return np.ones_like(np.asarray(eta, dtype=float))

    def information_weight(self, eta):
        return np.full_like(np.asarray(eta, dtype=float), 1.0 / self.sigma ** 2)

    def sample(self, eta, rng):
        return np.asarray(eta, dtype=float) + self.sigma * rng.standard_normal(np.shape(eta))


class NormalAdditiveError:
    """W = X + U with U ~ N(0, sigma_u^2). sigma_u = 0 means X is observed exactly."""

    def __init__(self, sigma_u, quad_size=None):
        if not np.isfinite(sigma_u) or sigma_u < 0:
            raise ConfigError(f"Measurement error SD must be non-negative, got {sigma_u}")
        self.sigma_u = float(sigma_u)
        self.quad_size = int(quad_size or settings.W_QUAD_SIZE)
        self._t, self._w = _hermite_rule(self.quad_size)

    @property
    def error_free(self):
        return self.sigma_u == 0.0

    def log_density(self, w, x):
        return stats.norm.logpdf(w, loc=x, scale=self.sigma_u)

    def nodes(self, x):
        """W quadrature nodes given X (trailing axis K) and their weights."""
        x = np.asarray(x, dtype=float)
        return x[..., None] + self.sigma_u * self._t, self._w

    def sample(self, x, rng):
        x = np.asarray(x, dtype=float)
        return x + self.sigma_u * rng.standard_normal(x.shape)


@dataclass(frozen=True)
class XGrid:
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape:
            raise ConfigError("Grid nodes and weights must be 1-d arrays of equal length")
        if nodes.size > 1 and np.any(np.diff(nodes) <= 0):
            raise ConfigError("Grid nodes must be strictly increasing")
        if np.any(weights <= 0):
            raise ConfigError("Grid weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-6:
            raise ConfigError(f"Posited grid weights sum to {weights.sum():.8f}, expected 1")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def size(self):
        return self.nodes.size

    @property
    def log_weights(self):
        return np.log(self.weights)


class PositedModel:
    """
    Working law p*(X) for the unobserved covariate, independent of Z.

    Wraps a scipy.stats frozen distribution. A normal law gets a Gauss-Hermite grid;
    anything else an equally spaced grid over mean +/- 5 SD with trapezoid weights
    times the density, normalized to sum to one.
    """

    def __init__(self, dist=None):
        self.dist = dist if dist is not None else stats.norm(0.0, 1.0)

    @property
    def is_normal(self):
        return getattr(getattr(self.dist, "dist", None), "name", None) == "norm"

    def grid(self, size):
        if size < 1:
            raise ConfigError(f"X grid size must be at least 1, got {size}")
        mean, sd = float(self.dist.mean()), float(self.dist.std())
        if size == 1:
            return XGrid(np.array([mean]), np.array([1.0]))
        if self.is_normal:
            t, w = _hermite_rule(size)
            return XGrid(mean + sd * t, w)
        nodes = np.linspace(mean - 5 * sd, mean + 5 * sd, size)
        trap = np.full(size, nodes[1] - nodes[0])
        trap[[0, -1]] *= 0.5
        weights = trap * self.dist.pdf(nodes)
        keep = weights > 0
        nodes, weights = nodes[keep], weights[keep]
        return XGrid(nodes, weights / weights.sum())

    def sample(self, size, rng):
        return self.dist.rvs(size=size, random_state=rng)


@dataclass(frozen=True)
class MEModelSpec:
    """
    Parametric (or parametric-augmented) measurement-error model.

    `terms` span beta; `theta_terms` (semiparametric fits only) span the m nuisance
    components that the profiling step replaces by theta(Z). The full parameter
    vector is (beta, alpha) with alpha of length m.
    """

    main_model: object
    error_model: NormalAdditiveError
    terms: tuple
    covariate_names: tuple = ()
    posited: PositedModel = field(default_factory=PositedModel)
    grid_size: int = field(default_factory=lambda: settings.GRID_SIZE)
    theta_terms: tuple = ()
    error_prone: str = "x"
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "theta_terms", tuple(self.theta_terms))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if self.grid_size < 1:
            raise ConfigError(f"grid_size must be positive, got {self.grid_size}")
        # Parses and validates the term lists
        _ = self.design

    @cached_property
    def design(self):
        return TermDesign(self.terms + self.theta_terms, self.covariate_names, self.error_prone)

    @cached_property
    def beta_design(self):
        return TermDesign(self.terms, self.covariate_names, self.error_prone)

    @cached_property
    def x_grid(self):
        return self.posited.grid(self.grid_size)

    @property
    def n_beta(self):
        return len(self.terms)

    @property
    def n_theta(self):
        return len(self.theta_terms)

    @property
    def n_params(self):
        return self.n_beta + self.n_theta

    @property
    def term_names(self):
        return list(self.terms) + [f"theta:{t}" for t in self.theta_terms]

    def replace(self, **changes):
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return MEModelSpec(**values)

    def linear_predictor(self, x, covariates, params):
        """eta = D(x, covariates) . params with params of shape (d,) or (B, d)."""
        design = self.design.evaluate(x, covariates)
        params = np.asarray(params, dtype=float)
        if params.ndim == 1:
            return design @ params
        extra = (1,) * (design.ndim - 2)
        return np.sum(design * params.reshape((params.shape[0],) + extra + (params.shape[1],)), axis=-1)


@dataclass
class Dataset:
    """
    Observed rows. `covariates` are the error-free covariates (Z in parametric fits,
    S in semiparametric fits); `z` is the scalar smoothing index of semiparametric fits.
    `x` is kept only for simulated data.
    """

    w: np.ndarray
    y: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = ()
    z: np.ndarray = None
    x: np.ndarray = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        n = self.w.size
        self.covariates = as_rows(self.covariates, n)
        self.covariate_names = tuple(self.covariate_names) or tuple(
            f"z{j + 1}" for j in range(self.covariates.shape[1]))
        if self.y.size != n:
            raise ConfigError(f"Response has {self.y.size} rows, surrogate has {n}")
        if len(self.covariate_names) != self.covariates.shape[1]:
            raise ConfigError("covariate_names does not match the covariate columns")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=float).ravel()
        if self.x is not None:
            self.x = np.asarray(self.x, dtype=float).ravel()
        for label, arr in (("w", self.w), ("y", self.y), ("covariates", self.covariates), ("z", self.z)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ConfigError(f"Dataset column {label} contains missing or non-finite values")

    @property
    def n(self):
        return self.w.size

    @property
    def semiparametric(self):
        return self.z is not None

    def subset(self, index):
        return Dataset(
            w=self.w[index], y=self.y[index], covariates=self.covariates[index],
            covariate_names=self.covariate_names,
            z=None if self.z is None else self.z[index],
            x=None if self.x is None else self.x[index],
        )

    def to_frame(self):
        frame = pd.DataFrame(self.covariates, columns=list(self.covariate_names))
        frame.insert(0, "w", self.w)
        frame.insert(0, "y", self.y)
        if self.z is not None:
            frame["z"] = self.z
        if self.x is not None:
            frame["x"] = self.x
        return frame

    @classmethod
    def from_frame(cls, frame, response="y", surrogate="w", covariates=None, index=None):
        covariates = [c for c in (covariates if covariates is not None else frame.columns)
                      if c not in (response, surrogate, index, "x")]
        missing = [c for c in [response, surrogate, index, *covariates] if c is not None and c not in frame.columns]
        if missing:
            raise ConfigError(f"Columns not found in data: {missing}")
        used = frame[[c for c in [response, surrogate, index, *covariates] if c is not None]]
        if used.isna().any().any():
            raise ConfigError("Missing values in the columns used by the model")
        columns = {name: _numeric_column(used[name]) for name in used.columns}
        return cls(
            w=columns[surrogate], y=columns[response],
            covariates=np.column_stack([columns[c] for c in covariates]) if covariates else np.zeros((len(used), 0)),
            covariate_names=tuple(covariates),
            z=None if index is None else columns[index],
        )


def _numeric_column(column):
    try:
        return column.to_numpy(float)
    except (TypeError, ValueError):
        bad = column[pd.to_numeric(column, errors="coerce").isna()]
        raise ConfigError(f"Column {column.name!r} has non-numeric value {bad.iloc[0]!r} in row {bad.index[0]}")


def _main_model(family, sigma_e=1.0):
    if family == "logistic":
        return LogisticMainModel()
    if family == "linear_normal":
        return LinearNormalMainModel(sigma=sigma_e)
    raise ConfigError(f"Unknown main model family {family!r}")


# Named models: main-model family and the terms built around the error-prone variable
MODEL_REGISTRY = {
    "logistic_linear": ("logistic", ("1", "x")),
    "logistic_quadratic": ("logistic", ("1", "x", "x^2")),
    "linear_normal": ("linear_normal", ("1", "x")),
}


def build_model(name, covariate_names=(), sigma_u=0.1, terms=None, theta_terms=(), posited=None,
                grid_size=None, w_quad_size=None, sigma_e=1.0, error_prone="x"):
    """
    Build an MEModelSpec from a registry name.

    Args:
        name (str): One of MODEL_REGISTRY
        covariate_names (sequence): Error-free covariate names, each entering linearly
            unless `terms` is given
        sigma_u (float): Measurement error SD
        terms (sequence): Explicit term list overriding the registry default
        theta_terms (sequence): Nuisance terms profiled by the semiparametric fit

    Returns:
        MEModelSpec
    """
    if name not in MODEL_REGISTRY:
        raise ConfigError(f"Unknown model {name!r}; valid models: {sorted(MODEL_REGISTRY)}")
    family, base_terms = MODEL_REGISTRY[name]
    if terms is None:
        base = tuple(t.replace("x", error_prone) for t in base_terms)
        if theta_terms:
            base = tuple(t for t in base if t != "1")
        terms = base + tuple(covariate_names)
    return MEModelSpec(
        main_model=_main_model(family, sigma_e),
        error_model=NormalAdditiveError(sigma_u, w_quad_size),
        terms=tuple(terms),
        covariate_names=tuple(covariate_names),
        posited=posited or PositedModel(),
        grid_size=int(grid_size or settings.GRID_SIZE),
        theta_terms=tuple(theta_terms),
        error_prone=error_prone,
        name=name,
    )
