import numpy as np
import pandas as pd
import pytest

from me_models import Dataset, build_model


def logistic_data(n=300, seed=11, sigma_u=0.0, n_cov=1):
    """Small logistic dataset; w equals x when sigma_u is 0."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    s = rng.standard_normal((n, n_cov))
    eta = -0.3 + 1.0 * x + 0.5 * s[:, 0]
    y = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    w = x + sigma_u * rng.standard_normal(n)
    names = tuple(f"z{j + 1}" for j in range(n_cov))
    return Dataset(w=w, y=y, covariates=s, covariate_names=names, x=x)


@pytest.fixture
def error_free_logistic():
    data = logistic_data()
    model = build_model("logistic_linear", covariate_names=data.covariate_names, sigma_u=0.0)
    return model, data


@pytest.fixture
def partially_linear_normal():
    """Linear-normal data with a smooth index effect, observed without error."""
    rng = np.random.default_rng(5)
    n = 200
    x = rng.standard_normal(n)
    s = rng.standard_normal((n, 1))
    z = rng.uniform(-1.0, 1.0, size=n)
    y = 1.0 * x + 0.5 * s[:, 0] + np.sin(z) + rng.standard_normal(n)
    data = Dataset(w=x, y=y, covariates=s, covariate_names=("s1",), z=z, x=x)
    model = build_model("linear_normal", covariate_names=("s1",), sigma_u=0.0, theta_terms=("1",))
    return model, data


@pytest.fixture
def logistic_csv(tmp_path):
    data = logistic_data(n=200, seed=3)
    frame = pd.DataFrame({"y": data.y, "w": data.w, "z1": data.covariates[:, 0]})
    path = tmp_path / "data.csv"
    frame.to_csv(path, index=False)
    return path, frame
