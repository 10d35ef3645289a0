import numpy as np
import pytest

from conftest import logistic_data
from errors import ConfigError, EmptyWindowError
from evaluation import theta_rmse
from me_models import Dataset, build_model
from penalty import penalty_gradient
from semipar import (KernelSpec, SemiparametricProfiler, ThetaProfile, check_bandwidth, default_bandwidth,
                     local_theta_solve, partition_score, semipar_sandwich)
from simharness import example2_design, example2_theta
from solver import PenalizedEESolver, SolverConfig, sandwich


def test_partition_score():
    L, psi = partition_score(np.array([1.0, 2.0, 3.0, 4.0]), 1)
    np.testing.assert_array_equal(L, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(psi, [4.0])
    L, psi = partition_score(np.arange(6.0).reshape(2, 3), 0)
    assert L.shape == (2, 3) and psi.shape == (2, 0)
    with pytest.raises(ConfigError):
        partition_score(np.zeros(3), 4)


@pytest.mark.parametrize("family", ["quartic", "epanechnikov-smooth"])
def test_kernel_moments(family):
    k0, k1, k2 = KernelSpec(family).moments()
    assert k0 == pytest.approx(1.0, abs=1e-8)
    assert k1 == pytest.approx(0.0, abs=1e-8)
    assert k2 == pytest.approx(1.0, abs=1e-8)


def test_kernel_is_compactly_supported():
    kernel = KernelSpec("quartic")
    assert kernel.support == pytest.approx(np.sqrt(7.0))
    assert kernel(np.sqrt(7.0) + 1e-9) == 0.0
    assert kernel(0.0) == pytest.approx(15.0 / 16.0 / np.sqrt(7.0))


def test_kernel_validation():
    with pytest.raises(ConfigError):
        KernelSpec("gaussian")
    with pytest.raises(ConfigError):
        KernelSpec(bandwidth=0.0)


def test_default_bandwidth():
    z = np.linspace(-1.0, 1.0, 1000)
    assert default_bandwidth(z) == pytest.approx(1.2 * np.std(z, ddof=1) / 10.0)
    assert check_bandwidth(z, default_bandwidth(z))
    assert not check_bandwidth(z, 5.0)


def test_local_solve_is_kernel_weighted_mean_residual(partially_linear_normal):
    model, data = partially_linear_normal
    beta = np.array([1.0, 0.5])
    kernel = KernelSpec("quartic", bandwidth=0.3)
    theta = local_theta_solve(data, beta, 0.1, kernel, model)

    s = np.sqrt(7.0)
    u = (data.z - 0.1) / 0.3 / s
    weights = np.where(np.abs(u) <= 1, (1 - u ** 2) ** 2, 0.0)
    resid = data.y - data.w * beta[0] - data.covariates[:, 0] * beta[1]
    assert theta[0] == pytest.approx(np.sum(weights * resid) / np.sum(weights), abs=1e-8)


def test_very_wide_bandwidth_gives_flat_theta(partially_linear_normal):
    model, data = partially_linear_normal
    profiler = SemiparametricProfiler(model, data, KernelSpec(bandwidth=1e3))
    beta = np.array([1.0, 0.5])
    left = profiler.local_theta_solve(beta, -0.5)
    right = profiler.local_theta_solve(beta, 0.5)
    assert left[0] == pytest.approx(right[0], abs=1e-5)
    resid = data.y - data.w * beta[0] - data.covariates[:, 0] * beta[1]
    assert left[0] == pytest.approx(resid.mean(), abs=1e-4)


def test_profiled_theta_tracks_the_index_effect(partially_linear_normal):
    model, data = partially_linear_normal
    profiler = SemiparametricProfiler(model, data, KernelSpec(bandwidth=0.3), theta_grid=15)
    theta = profiler.profile_theta(np.array([1.0, 0.5]))
    assert theta.shape == (data.n, 1)
    inner = np.abs(data.z) < 0.6
    assert np.mean(np.abs(theta[inner, 0] - np.sin(data.z[inner]))) < 0.3


def test_profiled_fit_recovers_linear_coefficients(partially_linear_normal):
    model, data = partially_linear_normal
    profiler = SemiparametricProfiler(model, data, KernelSpec(bandwidth=0.3), theta_grid=15)
    fit, profile = profiler.fit(0.0)
    assert fit.converged
    np.testing.assert_allclose(fit.beta_hat, [1.0, 0.5], atol=0.25)
    assert profile.dtheta_dbeta.shape == (data.n, 1, 2)
    cov = profiler.sandwich_cov(fit, profile)
    assert cov.shape == (2, 2)
    assert np.all(np.diag(cov) > 0)


def test_without_theta_terms_profiling_is_the_parametric_fit():
    base = logistic_data(n=150, seed=13)
    z = np.random.default_rng(1).uniform(size=base.n)
    data = Dataset(w=base.w, y=base.y, covariates=base.covariates, covariate_names=base.covariate_names, z=z)
    model = build_model("logistic_linear", covariate_names=data.covariate_names, sigma_u=0.0)

    profiled, profile = SemiparametricProfiler(model, data).fit(0.0)
    parametric = PenalizedEESolver(model, data).solve_unpenalized()
    np.testing.assert_allclose(profiled.beta_hat, parametric.beta_hat, atol=1e-6)
    assert profile.theta.shape == (data.n, 0)


def test_empty_kernel_window_is_reported(partially_linear_normal):
    model, _ = partially_linear_normal
    rng = np.random.default_rng(2)
    z = np.concatenate([rng.uniform(0.0, 1.0, 99), [10.0]])
    x = rng.standard_normal(100)
    data = Dataset(w=x, y=x + rng.standard_normal(100), covariates=rng.standard_normal((100, 1)),
                   covariate_names=("s1",), z=z)
    with pytest.raises(EmptyWindowError) as info:
        SemiparametricProfiler(model, data, KernelSpec(bandwidth=0.05), theta_grid=50)
    assert info.value.code == "EMPTY_WINDOW"


def test_boundary_targets_get_wider_bandwidths(partially_linear_normal):
    model, _ = partially_linear_normal
    z = np.concatenate([np.linspace(0.0, 1.0, 60), [1.2]])
    rng = np.random.default_rng(3)
    x = rng.standard_normal(z.size)
    data = Dataset(w=x, y=x, covariates=rng.standard_normal((z.size, 1)), covariate_names=("s1",), z=z)
    profiler = SemiparametricProfiler(model, data, KernelSpec(bandwidth=0.01), theta_grid=61)
    assert np.any(profiler.bandwidths > 0.01)
    assert np.all(profiler.bandwidths <= 0.08)


def test_profiler_needs_an_index():
    data = logistic_data(n=60)
    model = build_model("logistic_linear", covariate_names=data.covariate_names, sigma_u=0.0, theta_terms=("1",))
    with pytest.raises(ConfigError):
        SemiparametricProfiler(model, data)


def test_unknown_sensitivity_method_is_rejected(partially_linear_normal):
    model, data = partially_linear_normal
    with pytest.raises(ConfigError):
        SemiparametricProfiler(model, data, sensitivity="adjoint")


def test_implicit_sensitivities_match_reprofiling(partially_linear_normal):
    model, data = partially_linear_normal
    beta = np.array([0.9, 0.6])
    kernel = KernelSpec(bandwidth=0.3)
    by_difference = SemiparametricProfiler(model, data, kernel, theta_grid=15)
    implicit = SemiparametricProfiler(model, data, kernel, theta_grid=15, sensitivity="implicit")
    jac_d, sens_d = by_difference.jacobian(beta, with_sensitivity=True)
    jac_i, sens_i = implicit.jacobian(beta, with_sensitivity=True)
    assert sens_i.shape == (data.n, 1, 2)
    np.testing.assert_allclose(sens_i, sens_d, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(jac_i, jac_d, rtol=1e-5, atol=1e-8)


def test_implicit_fit_agrees_with_the_difference_fit(partially_linear_normal):
    model, data = partially_linear_normal
    kernel = KernelSpec(bandwidth=0.3)
    by_difference, _ = SemiparametricProfiler(model, data, kernel, theta_grid=15).fit(0.0)
    implicit, profile = SemiparametricProfiler(model, data, kernel, theta_grid=15, sensitivity="implicit").fit(0.0)
    assert implicit.converged
    np.testing.assert_allclose(implicit.beta_hat, by_difference.beta_hat, atol=1e-5)
    assert profile.dtheta_dbeta.shape == (data.n, 1, 2)


def test_profiled_penalized_fit_satisfies_the_fixed_point_equation(partially_linear_normal):
    model, data = partially_linear_normal
    config = SolverConfig()
    profiler = SemiparametricProfiler(model, data, KernelSpec(bandwidth=0.3), config, theta_grid=15)
    fit, _ = profiler.fit(0.05)
    assert fit.converged
    assert fit.residual <= 10 * config.tol
    active = np.asarray(fit.active_set)
    gap = profiler.estimating_function(fit.beta_hat, active) - penalty_gradient(fit.beta_hat, fit.penalty)[active]
    assert np.max(np.abs(gap)) <= 10 * config.tol


def test_sandwich_without_theta_terms_is_the_parametric_sandwich(partially_linear_normal):
    _, data = partially_linear_normal
    model = build_model("linear_normal", covariate_names=("s1",), sigma_u=0.0)
    solver = PenalizedEESolver(model, data)
    fit = solver.solve_unpenalized()
    profile = ThetaProfile(theta=np.zeros((data.n, 0)))
    np.testing.assert_allclose(semipar_sandwich(fit, profile, model, data), solver.sandwich_cov(fit), rtol=1e-6)


def test_sandwich_meat_is_the_score_covariance_when_scores_ignore_theta(partially_linear_normal, monkeypatch):
    model, data = partially_linear_normal
    profiler = SemiparametricProfiler(model, data, KernelSpec(bandwidth=0.3), theta_grid=15)
    fit, profile = profiler.fit(0.0, sensitivities=False)
    active = np.asarray(fit.active_set)

    def flat_in_theta(beta, theta, coords):
        return np.zeros((data.n, coords.size, 1)), -np.ones((data.n, 1, 1))

    monkeypatch.setattr(profiler, "_theta_derivatives", flat_in_theta)
    cov = profiler.sandwich_cov(fit, profile)
    A = profiler.jacobian(fit.beta_hat, active)
    L, _ = partition_score(profiler.full_scores(fit.beta_hat, profile.theta), 1)
    expected = sandwich(A, np.cov(L[:, active].T, bias=True), np.zeros(active.size), data.n)
    np.testing.assert_allclose(cov, expected, rtol=1e-6)


@pytest.mark.slow
def test_profiled_theta_follows_the_example2_index_effect():
    design = example2_design()
    data, _ = design.generate(2000, 2024)
    profiler = SemiparametricProfiler(design.model, data, theta_grid=design.theta_grid, sensitivity="implicit")
    fit, profile = profiler.fit(0.0, sensitivities=False)
    assert fit.converged
    # pointwise standard error of the local fit is about 0.2 at this sample size
    assert theta_rmse(profile.targets, profile.theta_targets, example2_theta) <= 0.4
