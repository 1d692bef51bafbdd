"""Monte Carlo laboratory: data generator, misspecification settings, runner.

The generator produces a two-population observational design with a binary
unmeasured confounder: the instrument-like covariate moves both the outcome
(through a trend shared across populations) and the treatment, while the
confounder moves treatment and outcome jointly.  The scalar treatment-effect
truth is 1 (or 0 with ``null_effect``).

Settings deliberately break chosen working models by dropping the covariate
interaction term; which estimators shrug that off and which collapse is the
whole point of the exercise.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, Term, intercept, term
from .errors import ConfigurationError, RefivError
from .fitting import expit
from .estimators import (EstimateReport, Method, ModelConfig, NuisanceSet,
                         StructuralSpec, benchmark_dr_gest, estimate_g_s,
                         estimate_g_z, estimate_ipw, estimate_mr_eff_nem,
                         estimate_mr_eff_nsm, estimate_mr_nem,
                         estimate_mr_nsm, estimate_tsls,
                         fit_nuisance_pipeline)

TRUE_EFFECT = 1.0


class Setting(str, Enum):
    ALL_CORRECT = "all_correct"
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"
    M4 = "M4"


TABLE_METHODS = (Method.TSLS, Method.GZ, Method.GS, Method.IPW,
                 Method.MR_NEM, Method.MR_EFF_NEM)


@dataclass(frozen=True)
class SimConfig:
    n: int
    replications: int
    seed: int
    setting: Setting = Setting.ALL_CORRECT
    estimators: tuple[Method, ...] = TABLE_METHODS
    parallel_workers: int = 1
    null_effect: bool = False

    def __post_init__(self) -> None:
        if self.n < 100:
            raise ConfigurationError("sample size below 100")
        if self.replications < 1:
            raise ConfigurationError("need at least one replication")
        if self.parallel_workers < 1:
            raise ConfigurationError("need at least one worker")
        object.__setattr__(self, "setting", Setting(self.setting))
        object.__setattr__(self, "estimators",
                           tuple(Method(e) for e in self.estimators))


@dataclass
class EstimatorSummary:
    method: Method
    bias: float
    empirical_se: Optional[float]
    mean_estimated_se: float
    coverage: float
    failures: int
    flagged: bool            # true when more than 5% of replicates failed
    n_used: int


@dataclass
class SimResult:
    config: SimConfig
    truth: float
    summaries: dict[Method, EstimatorSummary]
    estimates: dict[Method, np.ndarray] = field(repr=False, default_factory=dict)
    estimated_ses: dict[Method, np.ndarray] = field(repr=False,
                                                    default_factory=dict)

    def csv_rows(self) -> list[dict[str, object]]:
        rows = []
        for m in self.config.estimators:
            s = self.summaries[m]
            rows.append({
                "Model": self.config.setting.value,
                "Estimator": m.value,
                "Bias": s.bias,
                "SE": "" if s.empirical_se is None else s.empirical_se,
                "ESE": s.mean_estimated_se,
                "Cov": s.coverage,
            })
        return rows

    def to_json_dict(self) -> dict:
        return {
            "setting": self.config.setting.value,
            "n": self.config.n,
            "replications": self.config.replications,
            "seed": self.config.seed,
            "truth": self.truth,
            "estimators": {
                m.value: {
                    "bias": s.bias,
                    "empirical_se": s.empirical_se,
                    "mean_estimated_se": s.mean_estimated_se,
                    "coverage": s.coverage,
                    "failures": s.failures,
                    "flagged": s.flagged,
                    "n_used": s.n_used,
                } for m, s in self.summaries.items()
            },
        }


def write_results_csv(results, path) -> None:
    """Emit one or more simulation results as a Model/Estimator/... table."""
    if isinstance(results, SimResult):
        results = [results]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["Model", "Estimator", "Bias",
                                                "SE", "ESE", "Cov"])
        writer.writeheader()
        for res in results:
            for row in res.csv_rows():
                writer.writerow(row)


# ---------------------------------------------------------------------------
# data generator
# ---------------------------------------------------------------------------

def generate_dataset(n: int, seed: int, null_effect: bool = False) -> Dataset:
    """Draw one dataset from the two-population confounded design."""
    if n < 1:
        raise ConfigurationError("need at least one row")
    rng = np.random.default_rng(seed)
    c1 = rng.binomial(1, 0.5, n).astype(float)
    c2 = rng.normal(0.0, 1.0, n)
    u = rng.binomial(1, 0.5, n).astype(float)
    c12 = c1 * c2
    s = rng.binomial(1, expit(-0.5 + c1 + 0.6 * c2 + 0.5 * c12)).astype(float)
    z = rng.binomial(1, expit(0.25 * c1 - 0.25 * c2 + 0.5 * c12)).astype(float)
    p_a = expit(1.0 - 1.5 * z - 0.75 * c1 - 0.3 * c2 - 0.5 * c12 + u)
    a = s * rng.binomial(1, p_a).astype(float)
    effect = 0.0 if null_effect else TRUE_EFFECT
    mean = (1.0 + effect * a + u + 0.5 * c1 + 0.5 * c2 - 0.5 * c12
            + z * (1.0 - 0.4 * c1 - 0.4 * c2 + 0.5 * c12)
            + s * (0.5 * c1 + 0.5 * c2 + 0.5 * c12))
    y = rng.normal(mean, 1.0)
    return Dataset(y=y, a=a, z=z, s=s, c=np.column_stack([c1, c2]))


# ---------------------------------------------------------------------------
# misspecification settings
# ---------------------------------------------------------------------------

FULL_BASIS: tuple[Term, ...] = (intercept(), term(c=(0,)), term(c=(1,)),
                                term(c=(0, 1)))
REDUCED_BASIS: tuple[Term, ...] = (intercept(), term(c=(0,)), term(c=(1,)))
_MU_TERMS: tuple[Term, ...] = (intercept(), term(special=("z",)),
                               term(c=(0,)), term(c=(1,)), term(c=(0, 1)))


def scenario_specs(setting) -> ModelConfig:
    """Working-model term lists for one misspecification setting.

    Misspecification drops the covariate interaction from the named models;
    everything else keeps the full basis.  The log odds-ratio basis and the
    treatment-mean model stay full throughout, and the effect model is the
    scalar treatment indicator in every setting.
    """
    setting = Setting(setting)
    full, red = FULL_BASIS, REDUCED_BASIS
    tau = alpha = t = b0 = b1 = full
    if setting is Setting.M1:
        tau, alpha = red, red
    elif setting is Setting.M2:
        alpha, b0, b1 = red, red, red
    elif setting is Setting.M3:
        tau, b0, t = red, red, red
    elif setting is Setting.M4:
        t, b0, b1 = red, red, red
    return ModelConfig(
        tau_terms=tau, alpha_terms=alpha, rho_basis=full, t_basis=t,
        b0_basis=b0, b1_basis=b1, beta_terms=(term(special=("a",)),),
        mu_terms=_MU_TERMS)


# ---------------------------------------------------------------------------
# replication runner
# ---------------------------------------------------------------------------

_NEEDS_PIPELINE = {Method.TSLS, Method.GZ, Method.GS, Method.IPW,
                   Method.MR_NEM, Method.MR_NSM, Method.MR_EFF_NEM,
                   Method.MR_EFF_NSM}


def _dispatch(method: Method, ds: Dataset, nuis: Optional[NuisanceSet],
              spec: StructuralSpec) -> EstimateReport:
    if method is Method.TSLS:
        return estimate_tsls(ds, nuis, spec)
    if method is Method.GZ:
        return estimate_g_z(ds, nuis, spec)
    if method is Method.GS:
        return estimate_g_s(ds, nuis, spec)
    if method is Method.IPW:
        return estimate_ipw(ds, nuis, spec)
    if method is Method.MR_NEM:
        return estimate_mr_nem(ds, nuis, spec)
    if method is Method.MR_NSM:
        return estimate_mr_nsm(ds, nuis, spec)
    if method is Method.MR_EFF_NEM:
        return estimate_mr_eff_nem(ds, nuis, spec)
    if method is Method.MR_EFF_NSM:
        return estimate_mr_eff_nsm(ds, nuis, spec)
    if method is Method.DR_GEST_BENCHMARK:
        return benchmark_dr_gest(ds, spec)
    raise ConfigurationError(f"estimator {method.value} is not available in "
                             "the replication runner")


def _one_replicate(config: SimConfig, model_config: ModelConfig,
                   r: int) -> dict[Method, Optional[tuple[float, float]]]:
    seed_r = config.seed ^ r
    ds = generate_dataset(config.n, seed_r, config.null_effect)
    spec = model_config.spec()
    out: dict[Method, Optional[tuple[float, float]]] = {}
    nuis: Optional[NuisanceSet] = None
    needs = [m for m in config.estimators if m in _NEEDS_PIPELINE]
    if needs:
        mode = ("nsm" if any(m in (Method.MR_NSM, Method.MR_EFF_NSM)
                             for m in needs) else "nem")
        try:
            nuis = fit_nuisance_pipeline(ds, model_config, mode)
        except (RefivError, np.linalg.LinAlgError):
            for m in needs:
                out[m] = None
            nuis = None
    for m in config.estimators:
        if m in out:     # already marked failed by the pipeline
            continue
        try:
            rep = _dispatch(m, ds, nuis, spec)
            psi, se = float(rep.psi_hat[0]), float(rep.se[0])
            if not (np.isfinite(psi) and np.isfinite(se)):
                out[m] = None
            else:
                out[m] = (psi, se)
        except (RefivError, np.linalg.LinAlgError):
            out[m] = None
    return out


def run_replications(config: SimConfig,
                     model_config: Optional[ModelConfig] = None) -> SimResult:
    """Run the Monte Carlo study for one setting and aggregate the metrics.

    Per replicate: draw data with a replicate-specific seed, fit the
    setting's nuisances once, run every requested estimator, and record the
    estimate, its estimated SE, and interval coverage of the truth.  Failed
    replicates are excluded from the aggregates and counted; an estimator
    failing in more than 5% of replicates is flagged.
    """
    if model_config is None:
        model_config = scenario_specs(config.setting)
    truth = 0.0 if config.null_effect else TRUE_EFFECT
    R = config.replications

    if config.parallel_workers > 1:
        from joblib import Parallel, delayed
        results = Parallel(n_jobs=config.parallel_workers)(
            delayed(_one_replicate)(config, model_config, r)
            for r in range(1, R + 1))
    else:
        results = [_one_replicate(config, model_config, r)
                   for r in range(1, R + 1)]

    summaries: dict[Method, EstimatorSummary] = {}
    estimates: dict[Method, np.ndarray] = {}
    ses: dict[Method, np.ndarray] = {}
    for m in config.estimators:
        vals = [res[m] for res in results]
        ok = [v for v in vals if v is not None]
        failures = R - len(ok)
        if not ok:
            summaries[m] = EstimatorSummary(m, float("nan"), None,
                                            float("nan"), float("nan"),
                                            failures, True, 0)
            estimates[m] = np.empty(0)
            ses[m] = np.empty(0)
            continue
        psi = np.array([v[0] for v in ok])
        se = np.array([v[1] for v in ok])
        cover = ((psi - 1.96 * se <= truth) & (truth <= psi + 1.96 * se))
        summaries[m] = EstimatorSummary(
            method=m,
            bias=float(psi.mean() - truth),
            empirical_se=(float(psi.std(ddof=1)) if psi.size >= 2 else None),
            mean_estimated_se=float(se.mean()),
            coverage=float(cover.mean()),
            failures=failures,
            flagged=failures > 0.05 * R,
            n_used=int(psi.size),
        )
        estimates[m] = psi
        ses[m] = se
    return SimResult(config, truth, summaries, estimates, ses)
