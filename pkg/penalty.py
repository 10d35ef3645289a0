"""
Penalty derivatives and their local quadratic approximation (LQA).

The SCAD derivative is

    p'(g) = lam * { I(|g| <= lam) + (a*lam - |g|)_+ / ((a - 1) * lam) * I(|g| > lam) } * sign(g)

and the L1 derivative is lam * sign(g). Both are odd and bounded by lam.
"""

import logging
from dataclasses import dataclass

import numpy as np

from errors import ConfigError

logger = logging.getLogger(__name__)

SCAD = "SCAD"
L1 = "L1"
PENALTY_FAMILIES = (SCAD, L1)

DEFAULT_SCAD_A = 3.7


class _ZeroLock:
    """Signal returned by lqa_weight when a coefficient must be locked at zero."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "ZERO_LOCK"

    def __reduce__(self):
        return (_ZeroLock, ())


ZERO_LOCK = _ZeroLock()


@dataclass(frozen=True)
class PenaltySpec:
    family: str = SCAD
    lam: float = 0.0
    a: float = DEFAULT_SCAD_A

    def __post_init__(self):
        family = str(self.family).upper()
        if family not in PENALTY_FAMILIES:
            raise ConfigError(f"Unknown penalty family {self.family!r}; expected one of {PENALTY_FAMILIES}")
        object.__setattr__(self, "family", family)
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigError(f"Penalty lambda must be a finite non-negative number, got {self.lam}")
        if family == SCAD and not self.a > 2:
            raise ConfigError(f"SCAD shape parameter a must exceed 2, got {self.a}")

    def with_lambda(self, lam):
        return PenaltySpec(family=self.family, lam=float(lam), a=self.a)


def penalty_prime(gamma, spec):
    """
    First derivative of the penalty, evaluated componentwise.

    Args:
        gamma (float or ndarray): Coefficient value(s)
        spec (PenaltySpec): Penalty family, lambda and SCAD shape

    Returns:
        float or ndarray: p'_lambda(gamma), odd in gamma
    """
    g = np.asarray(gamma, dtype=float)
    lam = spec.lam
    sign = np.sign(g)
    if lam == 0.0:
        out = np.zeros_like(g)
    elif spec.family == L1:
        out = lam * sign
    else:
        ag = np.abs(g)
        tail = np.clip(spec.a * lam - ag, 0.0, None) / (spec.a - 1.0)
        out = np.where(ag <= lam, lam, tail) * sign
    if out.ndim == 0:
        return float(out)
    return out


def penalty_gradient(beta, spec, unpenalized_mask=()):
    """Vector of penalty derivatives; masked (unpenalized) coordinates are exactly zero."""
    beta = np.asarray(beta, dtype=float)
    grad = np.atleast_1d(penalty_prime(beta, spec)).astype(float)
    mask = np.asarray(list(unpenalized_mask), dtype=int)
    if mask.size:
        if mask.min() < 0 or mask.max() >= beta.size:
            raise IndexError(f"Unpenalized mask {mask.tolist()} out of bounds for {beta.size} coefficients")
        grad[mask] = 0.0
    return grad


def lqa_weight(beta_j, spec, zero_threshold):
    """
    LQA diagonal entry p'(|b|)/|b| for one coefficient.

    Returns ZERO_LOCK when |beta_j| is below zero_threshold; the caller then sets
    the coefficient to zero and drops the covariate from the working set.
    """
    if not zero_threshold > 0:
        raise ConfigError(f"zero_threshold must be positive, got {zero_threshold}")
    ab = abs(float(beta_j))
    if ab < zero_threshold:
        return ZERO_LOCK
    return penalty_prime(ab, spec) / ab


def lqa_weights(beta, spec, zero_threshold, unpenalized_mask=()):
    """
    Vectorized LQA diagonal.

    Returns:
        tuple: (weights, locked) where `locked` flags penalized coordinates below the
        threshold. Weights of locked and unpenalized coordinates are zero.
    """
    beta = np.asarray(beta, dtype=float)
    ab = np.abs(beta)
    locked = ab < zero_threshold
    weights = np.zeros_like(beta)
    safe = ~locked
    weights[safe] = np.atleast_1d(penalty_prime(ab[safe], spec)) / ab[safe]
    mask = np.asarray(list(unpenalized_mask), dtype=int)
    if mask.size:
        weights[mask] = 0.0
        locked[mask] = False
    return weights, locked


def default_zero_threshold(beta_start):
    """Relative cutoff 1e-6 * max(1, ||beta_start||_inf)."""
    beta_start = np.asarray(beta_start, dtype=float)
    scale = np.max(np.abs(beta_start)) if beta_start.size else 0.0
    return 1e-6 * max(1.0, float(scale))
