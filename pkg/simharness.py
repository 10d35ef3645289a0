"""
Simulation designs and replication studies.

Random streams: the study seed feeds numpy's SeedSequence; replication r draws its data
from SeedSequence(seed).spawn(replications)[r] through a PCG64 generator, and the
model-error matrices use SeedSequence((seed, CONTEXT_STREAM)). Results therefore depend
only on the StudyConfig, not on worker count or completion order.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg

import settings
from errors import ConfigError, MeasurementErrorModelError, NonConvergenceError, SingularBreadError, StudyFailedError
from evaluation import ame, build_context, count_zeros, rame, scaled_mad, theta_rmse
from me_models import Dataset, build_model
from penalty import PenaltySpec
from score_engine import ScoreEngine
from semipar import SENSITIVITY_METHODS, KernelSpec, SemiparametricProfiler
from solver import PenalizedEESolver, SolverConfig
from tuning import select_lambda

logger = logging.getLogger(__name__)

GENERATOR = "PCG64"
CONTEXT_STREAM = 7919
EXAMPLE2_THETA_GRID = 41
DESIGNS = ("example1", "example2", "framingham")
CRITERIA = ("EE", "GCV", "BIC")

# log(SBP - 50) location/scale used by the synthetic Framingham-style generator
FRAMINGHAM_LOG_SBP = (4.35, 0.2)
FRAMINGHAM_ERROR_VAR = 0.0126
FRAMINGHAM_TERMS = ("x", "x*z1", "x*z2", "x*z3", "1", "z1", "z2", "z3", "z2^2", "z1*z2", "z1*z3", "z2*z3")
FRAMINGHAM_BETA = (0.6, 0.0, 0.0, 0.0, -2.6, 0.4, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0)


def ar_covariance(dim, rho=0.5):
    idx = np.arange(dim)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def _ar_normal(n, dim, rng, rho=0.5):
    """Rows with covariance rho^|i-j| via the lower Cholesky factor."""
    factor = linalg.cholesky(ar_covariance(dim, rho), lower=True)
    return rng.standard_normal((n, dim)) @ factor.T


@dataclass
class SimulationDesign:
    """Truth and covariate sampler of one simulation design."""

    name: str
    model: object
    beta: np.ndarray
    zero_set: tuple
    sampler: object
    theta: object = None
    # Z targets for profiling theta, None profiles at every distinct z
    theta_grid: int = None

    def sample_covariates(self, n, rng):
        return self.sampler(n, rng, self.model)

    def generate(self, n, seed):
        """
        Draw a dataset.

        Args:
            n (int): Sample size
            seed (int or SeedSequence): Seed of the PCG64 stream

        Returns:
            tuple: (Dataset, SimulationDesign)
        """
        rng = np.random.default_rng(seed)
        draws = self.sample_covariates(n, rng)
        eta = self.model.beta_design.evaluate(draws["x"][:, None], draws["covariates"])[:, 0, :] @ self.beta
        if self.theta is not None:
            eta = eta + self.theta(draws["z"])
        y = self.model.main_model.sample(eta, rng)
        data = Dataset(w=draws["w"], y=y, covariates=draws["covariates"],
                       covariate_names=self.model.covariate_names, z=draws.get("z"), x=draws["x"])
        return data, self


def _example1_sampler(n, rng, model):
    x = rng.standard_normal(n)
    z = np.column_stack([_ar_normal(n, 6, rng), rng.integers(0, 2, size=n).astype(float)])
    w = model.error_model.sample(x, rng)
    return {"x": x, "w": w, "covariates": z}


def _example2_sampler(n, rng, model):
    x = rng.standard_normal(n)
    s = np.column_stack([_ar_normal(n, 8, rng), rng.integers(0, 2, size=n).astype(float)])
    z = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
    w = model.error_model.sample(x, rng)
    return {"x": x, "w": w, "covariates": s, "z": z}


def _framingham_sampler(n, rng, model):
    x = rng.standard_normal(n)
    chol_age = _ar_normal(n, 2, rng, rho=0.25)
    smoke = rng.integers(0, 2, size=n).astype(float)
    w = model.error_model.sample(x, rng)
    return {"x": x, "w": w, "covariates": np.column_stack([chol_age, smoke])}


def example2_theta(z):
    return 0.5 * np.cos(z)


def example1_design(sigma_u=0.1, grid_size=None):
    model = build_model("logistic_quadratic", covariate_names=[f"z{j}" for j in range(1, 8)],
                        sigma_u=sigma_u, grid_size=grid_size)
    beta = np.array([0.0, 1.5, 2.0, 0.0, 3.0, 0.0, 1.5, 0.0, 0.0, 0.0])
    return SimulationDesign("example1", model, beta, (0, 3, 5, 7, 8, 9), _example1_sampler)


def example2_design(sigma_u=0.1, grid_size=None):
    model = build_model("logistic_linear", covariate_names=[f"s{j}" for j in range(1, 10)],
                        sigma_u=sigma_u, theta_terms=("1",), grid_size=grid_size)
    beta = np.array([1.5, 2.0, 0.0, 0.0, 3.0, 0.0, 1.5, 0.0, 0.0, 0.0])
    return SimulationDesign("example2", model, beta, (2, 3, 5, 7, 8, 9), _example2_sampler,
                            theta=example2_theta, theta_grid=EXAMPLE2_THETA_GRID)


def framingham_design(grid_size=None):
    """Sparse truth on the saturated Framingham-style term set, X and covariates standardized."""
    sigma_u = np.sqrt(FRAMINGHAM_ERROR_VAR) / FRAMINGHAM_LOG_SBP[1]
    model = build_model("logistic_linear", covariate_names=("z1", "z2", "z3"), sigma_u=sigma_u,
                        terms=FRAMINGHAM_TERMS, grid_size=grid_size)
    beta = np.array(FRAMINGHAM_BETA)
    zero_set = tuple(int(j) for j in np.flatnonzero(beta == 0))
    return SimulationDesign("framingham", model, beta, zero_set, _framingham_sampler)


def get_design(name, sigma_u=0.1, grid_size=None):
    if name == "example1":
        return example1_design(sigma_u, grid_size)
    if name == "example2":
        return example2_design(sigma_u, grid_size)
    if name == "framingham":
        return framingham_design(grid_size)
    raise ConfigError(f"Unknown design {name!r}; valid designs: {list(DESIGNS)}")


def gen_example1(n, seed):
    """Example 1 data: quadratic logistic model in X with seven error-free covariates."""
    return example1_design().generate(n, seed)


def gen_example2(n, seed):
    """Example 2 data: partially linear logistic model with theta(Z) = 0.5 cos(Z)."""
    return example2_design().generate(n, seed)


def synthetic_framingham(n=1615, seed=0):
    """
    Raw-scale data with the Framingham column layout.

    Columns: chd (0/1), lmsbp = log(MSBP - 50), chol, age, smoke (0/1), generated from a
    sparse truth on the standardized scale with error variance 0.0126 on lmsbp.
    """
    data, design = framingham_design().generate(n, seed)
    loc, scale = FRAMINGHAM_LOG_SBP
    frame = pd.DataFrame({
        "chd": data.y.astype(int),
        "lmsbp": loc + scale * data.w,
        "chol": 230.0 + 45.0 * data.covariates[:, 0],
        "age": 52.0 + 8.5 * data.covariates[:, 1],
        "smoke": data.covariates[:, 2].astype(int),
    })
    return frame, design


@dataclass(frozen=True)
class StudyConfig:
    design: str = "example1"
    n: int = 500
    replications: int = 200
    criteria: tuple = CRITERIA
    seed: int = 0
    sigma_u: float = 0.1
    solver: SolverConfig = field(default_factory=SolverConfig)
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    grid_points: int = 40
    grid_min: float = 1e-3
    grid_max: float = 1.0
    grid_size: int = None
    theta_grid: int = None
    sensitivity: str = "implicit"
    n_mc: int = 100_000
    n_jobs: int = field(default_factory=lambda: settings.N_JOBS)
    max_failure_rate: float = 0.2
    out_dir: str = None

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ConfigError(f"Unknown design {self.design!r}; valid designs: {list(DESIGNS)}")
        if self.replications < 1:
            raise ConfigError(f"replications must be at least 1, got {self.replications}")
        if self.n < 50:
            raise ConfigError(f"n must be at least 50, got {self.n}")
        criteria = tuple(str(c).upper() for c in self.criteria)
        unknown = [c for c in criteria if c not in CRITERIA]
        if unknown or not criteria:
            raise ConfigError(f"Criteria must be a nonempty subset of {CRITERIA}, got {self.criteria}")
        object.__setattr__(self, "criteria", tuple(c for c in CRITERIA if c in criteria))
        if not 0 < self.grid_min < self.grid_max:
            raise ConfigError("Lambda grid bounds must satisfy 0 < grid_min < grid_max")
        if self.grid_points < 1:
            raise ConfigError("grid_points must be positive")
        if self.sensitivity not in SENSITIVITY_METHODS:
            raise ConfigError(f"sensitivity must be one of {SENSITIVITY_METHODS}, got {self.sensitivity!r}")


@dataclass
class StudyReport:
    """Per-criterion summaries, per-coefficient accuracy and the raw replication records."""

    config: StudyConfig
    records: pd.DataFrame
    summary: pd.DataFrame
    coefficients: pd.DataFrame
    failures: int = 0
    generator: str = GENERATOR

    @property
    def completed(self):
        return int(self.records["replication"].nunique()) if len(self.records) else 0

    def selection_table(self):
        """Markdown table laid out as RAME median (MAD), RAME_W median (MAD), C, E per criterion."""
        lines = ["| Method | n | RAME median (MAD) | RAME_W median (MAD) | C | E |",
                 "|---|---|---|---|---|---|"]
        for criterion, row in self.summary.iterrows():
            if criterion == "EE":
                continue
            lines.append(f"| {criterion} | {self.config.n} | {row['rame_median']:.3f} ({row['rame_mad']:.3f}) | "
                         f"{row['rame_w_median']:.3f} ({row['rame_w_mad']:.3f}) | {row['mean_C']:.3f} | "
                         f"{row['mean_E']:.3f} |")
        return "\n".join(lines)

    def accuracy_table(self, coefficients=None):
        """Markdown table of Bias (SD) and SE (Std(SE)) per criterion for the true nonzero coefficients."""
        frame = self.coefficients
        names = coefficients or [t for t in frame["term"].unique()
                                 if not frame.loc[frame["term"] == t, "true_zero"].iloc[0]]
        header = "| Method | " + " | ".join(f"{t} Bias (SD) | {t} SE (Std(SE))" for t in names) + " |"
        lines = [header, "|---|" + "---|---|" * len(names)]
        for criterion in self.config.criteria:
            cells = []
            for t in names:
                row = frame[(frame["criterion"] == criterion) & (frame["term"] == t)].iloc[0]
                cells.append(f"{row['bias']:.3f} ({row['sd']:.3f}) | {row['mean_se']:.3f} ({row['sd_se']:.3f})")
            lines.append(f"| {criterion} | " + " | ".join(cells) + " |")
        return "\n".join(lines)

    def to_markdown(self):
        c = self.config
        head = (f"Design {c.design}, n={c.n}, {self.completed} of {c.replications} replications "
                f"({self.failures} failed), seed={c.seed}, generator={self.generator}")
        return "\n\n".join([head, self.selection_table(), self.accuracy_table()]) + "\n"

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        records_path = os.path.join(out_dir, f"{self.config.design}_n{self.config.n}_records.csv")
        self.records.to_csv(records_path, index=False)
        self.summary.to_csv(os.path.join(out_dir, f"{self.config.design}_n{self.config.n}_summary.csv"))
        self.coefficients.to_csv(os.path.join(out_dir, f"{self.config.design}_n{self.config.n}_coefficients.csv"),
                                 index=False)
        with open(os.path.join(out_dir, f"{self.config.design}_n{self.config.n}_tables.md"), "w") as f:
            f.write(self.to_markdown())
        logger.info(f"Study artifacts written to {out_dir}")
        return records_path


def _fit_record(criterion, fit, lam, cov, reference, context, design, profile=None):
    se = np.full(design.beta.size, np.nan)
    if cov is not None:
        se[list(fit.active_set)] = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    C, E = count_zeros(fit, design.zero_set)
    record = {
        "lambda": lam, "converged": bool(fit.converged), "residual": float(fit.residual),
        "n_active": fit.n_active, "ame": ame(fit, context), "ame_w": ame(fit, context, use_W=True),
        "rame": rame(fit, reference, context), "rame_w": rame(fit, reference, context, use_W=True),
        "C": C, "E": E,
    }
    if profile is not None and design.theta is not None and profile.theta_targets is not None:
        record["theta_rmse"] = theta_rmse(profile.targets, profile.theta_targets, design.theta)
    for name, b, s in zip(design.model.terms, fit.beta_hat, se):
        record[f"beta[{name}]"] = float(b)
        record[f"se[{name}]"] = float(s)
    return {f"{criterion}:{key}": value for key, value in record.items()}


def run_replication(config, replication, seed_seq, context):
    """All requested fits on one simulated dataset, as one flat record with criterion-prefixed columns."""
    design = get_design(config.design, config.sigma_u, config.grid_size)
    data, _ = design.generate(config.n, seed_seq)
    semiparametric = design.model.n_theta > 0
    theta_grid = config.theta_grid or design.theta_grid
    engine = ScoreEngine(design.model, posterior=config.solver.posterior)
    if semiparametric:
        profiler = SemiparametricProfiler(design.model, data, config.kernel, config.solver, engine=engine,
                                          theta_grid=theta_grid, sensitivity=config.sensitivity)

        def covariance(fit, profile):
            return profiler.sandwich_cov(fit, profile)
    else:
        solver = PenalizedEESolver(design.model, data, config.solver, engine=engine)

        def covariance(fit, profile):
            return solver.sandwich_cov(fit)

    tuned = [c for c in config.criteria if c != "EE"]
    if tuned:
        trace = select_lambda(design.model, data, criterion=tuned[0].lower(), penalty=config.penalty,
                              config=config.solver, kernel=config.kernel, theta_grid=theta_grid,
                              grid_points=config.grid_points, grid_range=(config.grid_min, config.grid_max),
                              sensitivity=config.sensitivity, engine=engine)
        unpen, unpen_profile = trace.unpenalized, trace.unpenalized_profile
    elif semiparametric:
        unpen, unpen_profile = profiler.fit(0.0, config.penalty)
    else:
        unpen, unpen_profile = solver.solve_unpenalized(), None
    if not unpen.converged:
        raise NonConvergenceError(f"Unpenalized fit did not converge in replication {replication}")

    fits = []
    if "EE" in config.criteria:
        fits.append(("EE", unpen, 0.0, unpen_profile))
    for criterion in tuned:
        lam = trace.selected[criterion.lower()]
        fits.append((criterion, trace.best_fit(criterion.lower()), lam, trace.best_profile(criterion.lower())))

    record = {"replication": replication}
    for criterion, fit, lam, profile in fits:
        if fit.converged and fit.residual > 10 * config.solver.tol:
            logger.warning(f"Replication {replication} {criterion}: fixed-point residual {fit.residual:.2e}")
        try:
            cov = covariance(fit, profile) if fit.active_set else None
        except SingularBreadError as e:
            logger.warning(f"Replication {replication} {criterion}: no sandwich SEs ({e})")
            cov = None
        record.update(_fit_record(criterion, fit, lam, cov, unpen, context, design, profile))
    logger.info(f"Replication {replication} done")
    return record


def _run_safely(args):
    config, replication, seed_seq, context = args
    try:
        return replication, run_replication(config, replication, seed_seq, context), None
    except (MeasurementErrorModelError, np.linalg.LinAlgError) as e:
        logger.error(f"Replication {replication} failed: {e}")
        return replication, None, getattr(e, "code", type(e).__name__)


def criterion_view(records, criterion):
    """Columns of one criterion with the prefix stripped."""
    prefix = f"{criterion}:"
    columns = [c for c in records.columns if c.startswith(prefix)]
    return records[columns].rename(columns=lambda c: c[len(prefix):])


def summarize(records, design, criteria):
    """Per-criterion RAME/C/E summaries and per-coefficient bias, SD and SE summaries."""
    summary_rows, coef_rows = [], []
    for criterion in criteria:
        sub = criterion_view(records, criterion)
        summary_rows.append({
            "criterion": criterion, "replications": len(sub),
            "rame_median": float(np.median(sub["rame"])) if len(sub) else np.nan,
            "rame_mad": scaled_mad(sub["rame"]),
            "rame_w_median": float(np.median(sub["rame_w"])) if len(sub) else np.nan,
            "rame_w_mad": scaled_mad(sub["rame_w"]),
            "mean_C": float(sub["C"].mean()), "mean_E": float(sub["E"].mean()),
            "max_residual": float(sub["residual"].max()) if "residual" in sub and len(sub) else np.nan,
            "theta_rmse_median": float(np.median(sub["theta_rmse"])) if "theta_rmse" in sub and len(sub) else np.nan,
        })
        for j, name in enumerate(design.model.terms):
            est = sub[f"beta[{name}]"].to_numpy(float)
            se = sub[f"se[{name}]"].to_numpy(float)
            coef_rows.append({
                "criterion": criterion, "term": name, "true": float(design.beta[j]),
                "true_zero": j in design.zero_set,
                "bias": float(np.mean(est - design.beta[j])) if est.size else np.nan,
                "sd": float(np.std(est, ddof=1)) if est.size > 1 else np.nan,
                "mean_se": float(np.nanmean(se)) if np.any(np.isfinite(se)) else np.nan,
                "sd_se": float(np.nanstd(se, ddof=1)) if np.sum(np.isfinite(se)) > 1 else np.nan,
            })
    return pd.DataFrame(summary_rows).set_index("criterion"), pd.DataFrame(coef_rows)


def run_study(config):
    """
    Run a replication study.

    Args:
        config (StudyConfig): Design, size, criteria, seeds and solver settings

    Returns:
        StudyReport; raises StudyFailedError when more than max_failure_rate of replications fail
    """
    design = get_design(config.design, config.sigma_u, config.grid_size)
    context = build_context(design, n_mc=config.n_mc, seed=(config.seed, CONTEXT_STREAM))
    children = np.random.SeedSequence(config.seed).spawn(config.replications)
    tasks = [(config, r, children[r], context) for r in range(config.replications)]
    limit = config.max_failure_rate * config.replications
    logger.info(f"Running {config.replications} replications of {config.design} with n={config.n}")

    results, failures = [], {}
    if config.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            outcomes = list(pool.map(_run_safely, tasks))
    else:
        outcomes = []
        for task in tasks:
            outcomes.append(_run_safely(task))
            if sum(1 for _, _, code in outcomes if code is not None) > limit:
                break
    for replication, record, code in outcomes:
        if code is None:
            results.append(record)
        else:
            failures[replication] = code

    if len(failures) > limit:
        raise StudyFailedError(f"{len(failures)} of {config.replications} replications failed "
                               f"(limit {config.max_failure_rate:.0%})", failures=failures)

    records = pd.DataFrame(results)
    if len(records):
        records = records.sort_values("replication", kind="mergesort").reset_index(drop=True)
    summary, coefficients = summarize(records, design, config.criteria)
    report = StudyReport(config=config, records=records, summary=summary, coefficients=coefficients,
                         failures=len(failures))
    if failures:
        logger.warning(f"{len(failures)} replication(s) failed and were excluded: {sorted(failures)}")
    if config.out_dir:
        report.write(config.out_dir)
    return report
