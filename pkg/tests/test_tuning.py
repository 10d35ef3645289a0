import numpy as np
import pandas as pd
import pytest

from conftest import logistic_data
from errors import ConfigError, DFSaturatedError, SingularInfoError
from me_models import build_model
from penalty import PenaltySpec
from simharness import example1_design
from solver import FitResult, PenalizedEESolver
from tuning import (TRACE_COLUMNS, TuningTrace, bic_from, binomial_deviance, check_grid, default_grid, deviance,
                    df_from_information, effective_df, gcv_from, select_lambda)


def test_binomial_deviance_reference_values():
    y = np.array([0.0, 1.0, 1.0, 0.0])
    assert binomial_deviance(y, y) == pytest.approx(0.0, abs=1e-8)
    assert binomial_deviance(y, np.full(4, 0.5)) == pytest.approx(2 * 4 * np.log(2.0))
    assert binomial_deviance([1.0], [0.25]) == pytest.approx(2 * np.log(4.0))
    assert binomial_deviance([1.0], [0.25]) == pytest.approx(2.7726, abs=1e-4)


def test_binomial_deviance_clamps_the_mean():
    assert np.isfinite(binomial_deviance([1.0, 0.0], [0.0, 1.0]))


def test_bic_reference_value():
    assert bic_from(2 * 1000 * np.log(2.0), 4, 1000) == pytest.approx(1441.55, abs=0.01)


def test_gcv_with_zero_df_is_mean_deviance():
    assert gcv_from(150.0, 0.0, 300) == pytest.approx(0.5)
    assert gcv_from(150.0, 30.0, 300) == pytest.approx(150.0 / (300 * 0.81))


def test_saturated_df_is_rejected():
    with pytest.raises(DFSaturatedError):
        gcv_from(1.0, 10.0, 10)
    with pytest.raises(DFSaturatedError):
        bic_from(1.0, 11.0, 10)


def test_df_without_penalty_is_the_dimension():
    rng = np.random.default_rng(0)
    G = rng.standard_normal((50, 3))
    info = G.T @ G
    assert df_from_information(info, np.zeros(3), 50) == pytest.approx(3.0)


def test_df_shrinks_as_the_penalty_grows():
    rng = np.random.default_rng(1)
    G = rng.standard_normal((80, 4))
    info = G.T @ G
    values = [df_from_information(info, np.full(4, s), 80) for s in (0.0, 0.01, 0.1, 1.0, 100.0)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert 0.0 < values[-1] < 0.5


def test_df_singular_information():
    with pytest.raises(SingularInfoError):
        df_from_information(np.zeros((2, 2)), np.zeros(2), 10)


def test_effective_df_of_fits(error_free_logistic):
    model, data = error_free_logistic
    unpen = PenalizedEESolver(model, data).solve_unpenalized()
    assert effective_df(unpen, data, model) == pytest.approx(3.0)
    empty = FitResult(beta_hat=np.zeros(3), active_set=(), lam=10.0, iterations=1, converged=True,
                      penalty=PenaltySpec(lam=10.0))
    assert effective_df(empty, data, model) == 0.0
    sparse = FitResult(beta_hat=np.array([0.0, 0.9, 0.0]), active_set=(1,), lam=0.5, iterations=1,
                       converged=True, penalty=PenaltySpec(lam=0.5))
    assert 0.0 < effective_df(sparse, data, model) < 1.0


def test_deviance_of_the_empty_model(error_free_logistic):
    model, data = error_free_logistic
    empty = FitResult(beta_hat=np.zeros(3), active_set=(), lam=10.0, iterations=1, converged=True)
    assert deviance(empty, data, model) == pytest.approx(2 * data.n * np.log(2.0))


def test_default_grid_spans_the_unpenalized_estimate():
    grid = default_grid(np.array([0.2, -2.0, 0.5]), points=40)
    assert grid.size == 40
    assert grid[0] == pytest.approx(2e-3)
    assert grid[-1] == pytest.approx(2.0)
    assert np.all(np.diff(grid) > 0)
    masked = default_grid(np.array([5.0, 1.0]), points=3, unpenalized=(0,))
    assert masked[-1] == pytest.approx(1.0)


@pytest.mark.parametrize("grid", [[], [0.1, 0.1], [0.3, 0.2], [-0.1, 0.2], [0.1, np.inf]])
def test_check_grid_rejects(grid):
    with pytest.raises(ConfigError):
        check_grid(grid)


def test_single_lambda_grid_selects_that_lambda(error_free_logistic):
    model, data = error_free_logistic
    trace = select_lambda(model, data, grid=[0.05])
    assert trace.selected == {"gcv": 0.05, "bic": 0.05}
    assert trace.best_lambda == 0.05
    assert len(trace.to_frame()) == 1


def test_select_lambda_trace(error_free_logistic, tmp_path):
    model, data = error_free_logistic
    trace = select_lambda(model, data, grid_points=5, criterion="gcv")
    frame = trace.to_frame()
    assert list(frame.columns) == TRACE_COLUMNS
    assert len(frame) == 5
    assert trace.best_lambda == trace.selected["gcv"]
    assert trace.best_fit().lam == trace.selected["gcv"]
    assert trace.best_profile() is None
    assert frame["df"].iloc[0] >= frame["df"].iloc[-1]

    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    assert len(pd.read_csv(path)) == 5

    curves = trace.normalized_curves()
    for name in ("gcv", "bic"):
        finite = curves[name].dropna()
        assert finite.min() == pytest.approx(0.0) and finite.max() <= 1.0


def test_select_lambda_rejects_unknown_criterion(error_free_logistic):
    model, data = error_free_logistic
    with pytest.raises(ConfigError):
        select_lambda(model, data, criterion="aic")


def test_normalized_curves_with_constant_scores():
    records = pd.DataFrame({"lambda": [0.1, 0.2], "df": [1.0, 1.0], "deviance": [2.0, 2.0], "gcv": [3.0, 3.0],
                            "bic": [np.nan, 4.0], "n_active": [1, 1], "converged": [True, True]})
    trace = TuningTrace(lambdas=np.array([0.1, 0.2]), records=records)
    curves = trace.normalized_curves()
    np.testing.assert_allclose(curves["gcv"], [0.0, 0.0])
    assert np.isnan(curves["bic"].iloc[0]) and curves["bic"].iloc[1] == 0.0


@pytest.mark.slow
def test_bic_picks_the_true_support_with_measurement_error():
    data = logistic_data(n=600, seed=31, sigma_u=0.2, n_cov=4)
    model = build_model("logistic_linear", covariate_names=data.covariate_names, sigma_u=0.2, grid_size=15)
    trace = select_lambda(model, data, grid_points=10)
    fit = trace.best_fit("bic")
    assert {1, 2} <= set(fit.active_set)
    assert len(set(fit.active_set) & {3, 4, 5}) <= 1


@pytest.mark.slow
def test_sparsity_grows_along_the_lambda_grid():
    design = example1_design()
    data, _ = design.generate(500, 8)
    frame = select_lambda(design.model, data, grid_points=20).to_frame()
    active = frame.loc[frame["converged"].astype(bool), "n_active"].to_numpy(float)
    steps = np.diff(active)
    assert active.size >= 15
    assert np.mean(steps <= 0) >= 0.9
    assert active[0] > active[-1]
