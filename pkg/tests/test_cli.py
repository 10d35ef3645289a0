import json
import re

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm

import settings
from cli import (EXIT_CONFIG, EXIT_OK, AnalysisConfig, build_parser, format_estimate, main, saturated_terms,
                 standardize)
from me_models import Dataset
from simharness import FRAMINGHAM_TERMS


def _data_args(path):
    return ["--data", str(path), "--response", "y", "--surrogate", "w", "--covariates", "z1",
            "--terms", "1", "w", "z1"]


def test_unknown_design_is_a_config_error():
    assert main(["simulate", "--design", "bogus"]) == EXIT_CONFIG


def test_empty_term_list_is_a_usage_error(logistic_csv):
    path, _ = logistic_csv
    assert main(["fit", "--data", str(path), "--terms"]) == EXIT_CONFIG


def test_missing_input_file(tmp_path):
    assert main(["fit", "--data", str(tmp_path / "absent.csv")]) == EXIT_CONFIG


def test_unknown_config_keys_are_rejected(logistic_csv, tmp_path):
    path, _ = logistic_csv
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"bandwith": 0.2}))
    assert main(["fit", "--config", str(config), "--data", str(path)]) == EXIT_CONFIG


def test_fit_without_penalty_matches_logistic_mle(logistic_csv, tmp_path):
    path, frame = logistic_csv
    out = tmp_path / "estimates.csv"
    assert main(["fit", *_data_args(path), "--lambda", "0", "--no-standardize", "--out", str(out)]) == EXIT_OK
    estimates = pd.read_csv(out)
    assert list(estimates["term"]) == ["1", "w", "z1"]
    design = np.column_stack([np.ones(len(frame)), frame["w"], frame["z1"]])
    mle = sm.Logit(frame["y"], design).fit(disp=0).params
    np.testing.assert_allclose(estimates["fit_estimate"], mle, atol=1e-4)
    assert np.all(estimates["fit_se"] > 0)


def test_tune_writes_one_row_per_lambda(logistic_csv, tmp_path):
    path, _ = logistic_csv
    out = tmp_path / "trace.csv"
    assert main(["tune", *_data_args(path), "--grid-points", "3", "--out", str(out)]) == EXIT_OK
    trace = pd.read_csv(out)
    assert len(trace) == 3
    assert {"lambda", "df", "gcv", "bic"} <= set(trace.columns)


def test_analyze_writes_results_trace_and_curves(logistic_csv, tmp_path):
    path, _ = logistic_csv
    out = tmp_path / "analysis"
    assert main(["analyze", *_data_args(path), "--grid-points", "3", "--unpenalized", "1",
                 "--out", str(out)]) == EXIT_OK
    results = pd.read_csv(out / "analysis_results.csv")
    assert {"EE", "GCV", "BIC"} <= set(results.columns)
    assert len(pd.read_csv(out / "tuning_trace.csv")) == 3
    assert len(pd.read_csv(out / "score_curves.csv")) == 3


def test_make_framingham(tmp_path):
    out = tmp_path / "framingham.csv"
    assert main(["make-framingham", "--n", "120", "--seed", "2", "--out", str(out)]) == EXIT_OK
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["chd", "lmsbp", "chol", "age", "smoke"]
    assert len(frame) == 120


def test_saturated_terms_cover_the_framingham_model():
    rng = np.random.default_rng(0)
    data = Dataset(w=rng.standard_normal(50), y=np.zeros(50),
                   covariates=np.column_stack([rng.standard_normal(50), rng.standard_normal(50),
                                               rng.integers(0, 2, 50)]),
                   covariate_names=("chol", "age", "smoke"))
    terms = saturated_terms("lmsbp", data)
    assert len(terms) == 13
    renamed = {"x": "lmsbp", "z1": "chol", "z2": "age", "z3": "smoke"}
    for term in FRAMINGHAM_TERMS:
        assert re.sub(r"\b(x|z1|z2|z3)\b", lambda m: renamed[m.group(1)], term) in terms
    assert "smoke^2" not in terms


def test_standardize_rescales_measurement_error():
    rng = np.random.default_rng(1)
    data = Dataset(w=3.0 * rng.standard_normal(200) + 5.0, y=np.zeros(200),
                   covariates=np.column_stack([10.0 * rng.standard_normal(200), rng.integers(0, 2, 200)]))
    scaled, sigma_u = standardize(data, 0.3)
    assert np.std(scaled.w, ddof=1) == pytest.approx(1.0)
    assert scaled.w.mean() == pytest.approx(0.0, abs=1e-12)
    assert sigma_u == pytest.approx(0.3 / np.std(data.w, ddof=1))
    np.testing.assert_array_equal(scaled.covariates[:, 1], data.covariates[:, 1])


def test_analysis_config_validation():
    assert AnalysisConfig(sigma_u_var=0.04).sigma_u == pytest.approx(0.2)
    assert AnalysisConfig().sigma_u == 0.0
    with pytest.raises(ValueError):
        AnalysisConfig(sigma_u=0.1, sigma_u_var=0.01)
    with pytest.raises(ValueError):
        AnalysisConfig(sensitivity="adjoint")
    with pytest.raises(ValueError):
        AnalysisConfig(family="poisson")
    with pytest.raises(ValueError):
        AnalysisConfig(terms=())


def test_format_estimate():
    assert format_estimate(0.0, np.nan, False) == "0 (NA)"
    assert format_estimate(1.23456, 0.1, True) == "1.235 (0.100)"


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_non_numeric_csv_value_is_a_config_error(logistic_csv, tmp_path):
    _, frame = logistic_csv
    frame = frame.astype({"z1": object})
    frame.loc[5, "z1"] = "abc"
    path = tmp_path / "bad.csv"
    frame.to_csv(path, index=False)
    assert main(["fit", *_data_args(path)]) == EXIT_CONFIG


def test_config_file_with_both_error_forms_is_rejected(logistic_csv, tmp_path):
    path, _ = logistic_csv
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"sigma_u": 0.1, "sigma_u_var": 0.01}))
    assert main(["fit", "--config", str(config), *_data_args(path)]) == EXIT_CONFIG
    # a command-line error flag replaces both
    out = tmp_path / "estimates.csv"
    assert main(["fit", "--config", str(config), *_data_args(path), "--sigma-u", "0", "--out", str(out)]) == EXIT_OK


def test_fit_accepts_a_sensitivity_method(logistic_csv):
    path, _ = logistic_csv
    args = build_parser().parse_args(["fit", *_data_args(path), "--sensitivity", "implicit"])
    assert args.sensitivity == "implicit"
    with pytest.raises(SystemExit):
        build_parser().parse_args(["fit", *_data_args(path), "--sensitivity", "adjoint"])


def test_simulate_writes_to_the_results_directory_by_default(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "RESULTS_DIR", str(tmp_path / "results"))
    monkeypatch.setattr(settings, "CACHE_DIR", str(tmp_path / "cache"))
    assert main(["simulate", "--design", "example1", "--n", "400", "--reps", "1", "--criteria", "EE",
                 "--n-mc", "2000", "--jobs", "1"]) == EXIT_OK
    assert (tmp_path / "results" / "example1_n400_records.csv").exists()
    assert (tmp_path / "results" / "example1_n400_tables.md").exists()
