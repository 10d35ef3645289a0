import numpy as np
import pandas as pd
import pytest
from scipy import stats

from errors import ConfigError
from me_models import (MODEL_REGISTRY, Dataset, LinearNormalMainModel, LogisticMainModel, NormalAdditiveError,
                       PositedModel, TermDesign, XGrid, _hermite_rule, as_rows, build_model)


def test_hermite_rule_integrates_normal_moments():
    t, w = _hermite_rule(20)
    assert w.sum() == pytest.approx(1.0)
    assert np.sum(w * t) == pytest.approx(0.0, abs=1e-12)
    assert np.sum(w * t ** 2) == pytest.approx(1.0)
    assert np.sum(w * t ** 4) == pytest.approx(3.0)


def test_term_design_products_and_powers():
    design = TermDesign(["1", "x", "x^2", "x*z1", "z1*z2"], covariate_names=("z1", "z2"))
    x = np.array([[2.0], [-1.0]])
    cov = np.array([[3.0, 0.5], [1.0, 4.0]])
    values = design.evaluate(x, cov)
    np.testing.assert_allclose(values[:, 0, :], [[1, 2, 4, 6, 1.5], [1, -1, 1, -1, 4]])


def test_term_design_splits_x_powers_from_covariate_parts():
    design = TermDesign(["1", "x", "x^2", "x*z1", "z1*z2", "x^2*z2"], covariate_names=("z1", "z2"))
    np.testing.assert_array_equal(design.x_powers, [0, 1, 2, 1, 0, 2])
    cov = np.array([[3.0, 0.5], [1.0, 4.0]])
    np.testing.assert_allclose(design.covariate_part(cov), [[1, 1, 1, 3, 1.5, 0.5], [1, 1, 1, 1, 4, 4]])
    x = np.array([[2.0], [-1.0]])
    rebuilt = design.covariate_part(cov) * x ** design.x_powers
    np.testing.assert_allclose(rebuilt, design.evaluate(x, cov)[:, 0, :])


def test_term_design_without_covariates():
    design = TermDesign(["1", "x"])
    values = design.evaluate(np.array([[0.5, 1.5]]), np.zeros((1, 0)))
    assert values.shape == (1, 2, 2)
    np.testing.assert_allclose(values[0], [[1.0, 0.5], [1.0, 1.5]])


def test_as_rows_handles_empty_input():
    assert as_rows(np.zeros((4, 0)), 4).shape == (4, 0)
    assert as_rows([1.0, 2.0, 3.0], 3).shape == (3, 1)


@pytest.mark.parametrize("terms", [[], ["x", "q1"], ["x^-1"]])
def test_term_design_rejects_bad_terms(terms):
    with pytest.raises(ConfigError):
        TermDesign(terms, covariate_names=("z1",))


def test_logistic_y_nodes_are_probabilities():
    values, logw = LogisticMainModel().y_nodes(np.array([0.0, 2.0]))
    np.testing.assert_allclose(np.exp(logw).sum(axis=-1), 1.0)
    np.testing.assert_allclose(values[0], [0.0, 1.0])


def test_linear_normal_y_nodes_reproduce_mean_and_variance():
    main = LinearNormalMainModel(sigma=2.0)
    values, logw = main.y_nodes(np.array([1.5]))
    w = np.exp(logw[0])
    assert np.sum(w * values[0]) == pytest.approx(1.5)
    assert np.sum(w * (values[0] - 1.5) ** 2) == pytest.approx(4.0)


def test_error_model_validation_and_error_free_flag():
    assert NormalAdditiveError(0.0).error_free
    with pytest.raises(ConfigError):
        NormalAdditiveError(-0.1)


def test_posited_normal_grid_is_hermite():
    grid = PositedModel().grid(25)
    assert grid.size == 25
    assert grid.weights.sum() == pytest.approx(1.0)
    assert np.sum(grid.weights * grid.nodes ** 2) == pytest.approx(1.0)


def test_posited_single_node_grid_sits_at_the_mean():
    grid = PositedModel(stats.norm(0.3, 2.0)).grid(1)
    np.testing.assert_allclose(grid.nodes, [0.3])


def test_posited_non_normal_grid():
    grid = PositedModel(stats.t(df=5)).grid(41)
    assert grid.weights.sum() == pytest.approx(1.0)
    assert np.all(np.diff(grid.nodes) > 0)


def test_x_grid_validation():
    with pytest.raises(ConfigError):
        XGrid(np.array([0.0, -1.0]), np.array([0.5, 0.5]))
    with pytest.raises(ConfigError):
        XGrid(np.array([0.0, 1.0]), np.array([0.4, 0.4]))


def test_build_model_from_registry():
    model = build_model("logistic_quadratic", covariate_names=("z1", "z2"), sigma_u=0.2)
    assert model.terms == ("1", "x", "x^2", "z1", "z2")
    assert model.n_params == 5
    assert model.error_model.sigma_u == 0.2
    assert set(MODEL_REGISTRY) >= {"logistic_linear", "logistic_quadratic", "linear_normal"}


def test_build_model_with_theta_terms_drops_intercept():
    model = build_model("logistic_linear", covariate_names=("s1",), theta_terms=("1",))
    assert model.terms == ("x", "s1")
    assert model.n_beta == 2 and model.n_theta == 1
    assert model.term_names == ["x", "s1", "theta:1"]


def test_build_model_unknown_name():
    with pytest.raises(ConfigError):
        build_model("probit")


def test_dataset_from_frame_round_trip():
    frame = pd.DataFrame({"y": [0, 1, 1], "w": [0.1, 0.2, -0.3], "a": [1.0, 2.0, 3.0], "t": [0.0, 0.5, 1.0]})
    data = Dataset.from_frame(frame, covariates=["a"], index="t")
    assert data.n == 3 and data.semiparametric
    assert data.covariate_names == ("a",)
    back = data.to_frame()
    np.testing.assert_allclose(back["w"], frame["w"])
    np.testing.assert_allclose(back["z"], frame["t"])


def test_dataset_rejects_missing_values():
    frame = pd.DataFrame({"y": [0, 1], "w": [0.1, None], "a": [1.0, 2.0]})
    with pytest.raises(ConfigError):
        Dataset.from_frame(frame)


def test_dataset_rejects_non_numeric_values():
    frame = pd.DataFrame({"y": [0, 1, 1], "w": [0.1, 0.2, 0.3], "a": ["1.5", "abc", "2"]})
    with pytest.raises(ConfigError, match="abc"):
        Dataset.from_frame(frame)


def test_dataset_rejects_unknown_columns():
    frame = pd.DataFrame({"y": [0, 1], "w": [0.1, 0.2]})
    with pytest.raises(ConfigError):
        Dataset.from_frame(frame, covariates=["missing"])


def test_dataset_subset():
    data = Dataset(w=[1.0, 2.0, 3.0], y=[0.0, 1.0, 0.0], covariates=np.zeros((3, 0)))
    sub = data.subset([0, 2])
    np.testing.assert_allclose(sub.w, [1.0, 3.0])
    assert sub.covariates.shape == (2, 0)
