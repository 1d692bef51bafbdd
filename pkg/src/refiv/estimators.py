"""Conditional-ATT estimation under the reference-population instrument design.

The estimators here share one computational pattern: every fitted quantity
(component-law models, odds ratio, outcome nuisances, the effect itself) is
the root of a mean estimating equation, and the full collection is stacked
into one triangular M-estimation system.  Point estimates come from solving
the blocks in dependency order; standard errors come from the sandwich over
the entire stack, so nuisance uncertainty propagates into the effect's SE
without any bootstrap.

Suite overview (all return :class:`EstimateReport`):

* ``estimate_mr_nem`` / ``estimate_mr_nsm``  — multiply robust estimators
  built from the doubly-centred index functions of the joint laws.
* ``estimate_mr_eff_nem`` / ``estimate_mr_eff_nsm`` — the same equations with
  variance-optimal index functions under a homoscedastic working assumption.
* ``estimate_tsls``, ``estimate_g_z``, ``estimate_g_s``, ``estimate_ipw`` —
  singly/doubly robust comparators, each leaning on one modelling route.
* ``estimate_did_nem`` / ``estimate_did_nsm`` — panel (two-period) variants.
* ``benchmark_dr_gest`` — a deliberately confounded doubly robust
  g-estimator that conditions on the proxy covariate instead of using it as
  an instrument; included as a cautionary comparator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .data import (CovariateFrame, Dataset, Family, GLMSpec, Observation,
                   PanelDataset, Term, build_design, intercept, term)
from .errors import (ConfigurationError, ConvergenceError, RelevanceError)
from .fitting import (FittedModel, VarianceReport, _ColumnOverride, expit,
                      fit_glm, logit, sandwich_variance,
                      solve_estimating_equations)
from .jointlaw import (WEIGHT_FLOOR, JointLawAZ, JointLawZS, cells_zs,
                       estimate_rho, rho_score_rows, strip_specials)

CI_Z = 1.96


class Method(str, Enum):
    TSLS = "TSLS"
    GZ = "GZ"
    GS = "GS"
    IPW = "IPW"
    MR_NEM = "MR_NEM"
    MR_NSM = "MR_NSM"
    MR_EFF_NEM = "MR_EFF_NEM"
    MR_EFF_NSM = "MR_EFF_NSM"
    DID_NEM = "DID_NEM"
    DID_NSM = "DID_NSM"
    DR_GEST_BENCHMARK = "DR_GEST_BENCHMARK"
    NP_ATT_NEM = "NP_ATT_NEM"
    NP_ATT_NSM = "NP_ATT_NSM"


@dataclass
class EstimateReport:
    """One estimator's output: point estimate, sandwich SE, 95% CI."""

    psi_hat: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    method: Method
    diagnostics: dict = field(default_factory=dict)


def _report(psi: np.ndarray, se: np.ndarray, method: Method,
            diagnostics: dict) -> EstimateReport:
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    se = np.atleast_1d(np.asarray(se, dtype=float))
    return EstimateReport(psi, se, psi - CI_Z * se, psi + CI_Z * se, method,
                          diagnostics)


# ---------------------------------------------------------------------------
# model structure declarations
# ---------------------------------------------------------------------------

def _pure_c(terms: Sequence[Term], what: str) -> tuple[Term, ...]:
    terms = tuple(terms)
    if not terms:
        raise ConfigurationError(f"{what}: empty term list")
    for t in terms:
        if t.special_factors:
            raise ConfigurationError(f"{what}: term {t} must be a pure "
                                     "covariate function")
    if len(set(terms)) != len(terms):
        raise ConfigurationError(f"{what}: duplicate terms")
    return terms


@dataclass(frozen=True)
class StructuralSpec:
    """Form of the treatment-effect function.

    Every term must carry the treatment factor A (no effect on the untreated
    by construction); terms may additionally carry instrument factors when
    effect modification by the instrument is entertained.
    """

    beta_terms: tuple[Term, ...]

    def __post_init__(self) -> None:
        terms = tuple(self.beta_terms)
        if not terms:
            raise ConfigurationError("effect model needs at least one term")
        for t in terms:
            if "a" not in t.special_factors:
                raise ConfigurationError(
                    f"effect term {t} lacks the treatment factor")
            if "s" in t.special_factors:
                raise ConfigurationError(
                    f"effect term {t} must not involve the population label")
        if len(set(terms)) != len(terms):
            raise ConfigurationError("duplicate effect terms")
        object.__setattr__(self, "beta_terms", terms)

    @property
    def k(self) -> int:
        return len(self.beta_terms)

    @property
    def effect_basis(self) -> tuple[Term, ...]:
        """Pure-covariate part of the effect terms (default index basis)."""
        return strip_specials(self.beta_terms)

    @property
    def instrument_index_terms(self) -> tuple[Term, ...]:
        """Effect terms with the treatment factor swapped for the instrument."""
        out = tuple(Term(t.covariate_indices,
                         (t.special_factors - {"a"}) | {"z"})
                    for t in self.beta_terms)
        if len(set(out)) != len(out):
            raise ConfigurationError("instrument index terms collide")
        return out


@dataclass(frozen=True)
class ModelConfig:
    """Term lists for every working model used by the nuisance pipeline."""

    tau_terms: tuple[Term, ...]      # f(Z=1 | S=0, C)
    alpha_terms: tuple[Term, ...]    # f(S=1 | Z=0, C)
    rho_basis: tuple[Term, ...]      # log odds-ratio basis
    t_basis: tuple[Term, ...]        # instrument-outcome trend: t = Z * basis
    b0_basis: tuple[Term, ...]       # reference-population outcome level
    b1_basis: tuple[Term, ...]       # target-population outcome shift
    beta_terms: tuple[Term, ...]     # treatment-effect terms (with A factor)
    q_basis: Optional[tuple[Term, ...]] = None    # selection bias: q = A * basis
    pi_terms: Optional[tuple[Term, ...]] = None   # f(A=1 | Z, S=1, C), may use z
    mu_terms: Optional[tuple[Term, ...]] = None   # E(A | Z, S=1, C) for the
                                                  # efficient index, may use z

    def __post_init__(self) -> None:
        object.__setattr__(self, "tau_terms", _pure_c(self.tau_terms, "tau"))
        object.__setattr__(self, "alpha_terms", _pure_c(self.alpha_terms, "alpha"))
        object.__setattr__(self, "rho_basis", _pure_c(self.rho_basis, "rho"))
        object.__setattr__(self, "t_basis", _pure_c(self.t_basis, "t"))
        object.__setattr__(self, "b0_basis", _pure_c(self.b0_basis, "b0"))
        object.__setattr__(self, "b1_basis", _pure_c(self.b1_basis, "b1"))
        object.__setattr__(self, "beta_terms",
                           StructuralSpec(tuple(self.beta_terms)).beta_terms)
        if self.q_basis is not None:
            object.__setattr__(self, "q_basis", _pure_c(self.q_basis, "q"))
        for name in ("pi_terms", "mu_terms"):
            terms = getattr(self, name)
            if terms is not None:
                terms = tuple(terms)
                for t in terms:
                    if t.special_factors - {"z"}:
                        raise ConfigurationError(
                            f"{name}: only the instrument factor is allowed")
                object.__setattr__(self, name, terms)

    def spec(self) -> StructuralSpec:
        return StructuralSpec(self.beta_terms)

    # derived index-function term lists (just-identified defaults)
    @property
    def e1_terms(self) -> tuple[Term, ...]:
        return tuple(t.with_special("z") for t in self.rho_basis)

    @property
    def e2_terms(self) -> tuple[Term, ...]:
        return tuple(t.with_special("z") for t in self.t_basis)

    @property
    def e6_terms(self) -> tuple[Term, ...]:
        if self.q_basis is None:
            raise ConfigurationError("no selection-bias basis configured")
        return tuple(t.with_special("a") for t in self.q_basis)


@dataclass
class NuisanceSet:
    """Everything the effect equations need besides the effect itself."""

    config: ModelConfig
    tau: FittedModel
    alpha: FittedModel
    rho: np.ndarray
    nu: np.ndarray          # doubly robust trend coefficients (re-estimated)
    theta0: np.ndarray
    theta1: np.ndarray
    nu_tilde: np.ndarray    # plain least-squares-style trend (first pass)
    psi_tilde: np.ndarray   # preliminary effect from the staged system
    pi: Optional[FittedModel] = None
    omega: Optional[np.ndarray] = None
    mu: Optional[FittedModel] = None

    def law_zs(self) -> JointLawZS:
        return JointLawZS(self.tau, self.alpha, self.rho, self.config.rho_basis)

    def law_az(self) -> JointLawAZ:
        if self.pi is None:
            raise ConfigurationError("no propensity model fitted")
        return JointLawAZ.from_zs(self.pi, self.law_zs())


# ---------------------------------------------------------------------------
# residual algebra
# ---------------------------------------------------------------------------

def residual_epsilon_star(obs: Observation, psi: np.ndarray, nuis: NuisanceSet,
                          spec: StructuralSpec) -> float:
    """y − effect·s − trend − reference level − target shift·s for one row."""
    frame = CovariateFrame(obs.c, a=obs.a, z=obs.z, s=obs.s)
    cfg = nuis.config
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    val = obs.y
    val -= obs.s * float((build_design(frame, spec.beta_terms) @ psi)[0])
    val -= float((build_design(frame, cfg.e2_terms) @ nuis.nu)[0])
    val -= float((build_design(frame, cfg.b0_basis) @ nuis.theta0)[0])
    val -= obs.s * float((build_design(frame, cfg.b1_basis) @ nuis.theta1)[0])
    return float(val)


def residual_epsilon(obs: Observation, psi: np.ndarray, nuis: NuisanceSet,
                     spec: StructuralSpec) -> float:
    """The NSM residual: the centred selection-bias term is subtracted on
    target-population rows, with the conditional expectation in closed form
    for binary treatment."""
    if nuis.pi is None or nuis.omega is None:
        raise ConfigurationError(
            "selection-bias residual needs fitted propensity and "
            "selection-bias coefficients")
    base = residual_epsilon_star(obs, psi, nuis, spec)
    frame = CovariateFrame(obs.c, a=obs.a, z=obs.z, s=obs.s)
    q_at_a1 = float((build_design(CovariateFrame(obs.c), nuis.config.q_basis)
                     @ nuis.omega)[0])
    prop = float(nuis.pi.predict(frame)[0])
    return base - obs.s * q_at_a1 * (obs.a - prop)


# ---------------------------------------------------------------------------
# stacked-equation machinery
# ---------------------------------------------------------------------------

@dataclass
class _Block:
    name: str
    size: int
    rows: Callable[[np.ndarray], np.ndarray]
    presolved: Optional[np.ndarray] = None


def _slices(sizes: Sequence[tuple[str, int]]) -> dict[str, slice]:
    out: dict[str, slice] = {}
    at = 0
    for name, size in sizes:
        out[name] = slice(at, at + size)
        at += size
    return out


def _solve_stack(blocks: Sequence[_Block], sl: dict[str, slice]) -> np.ndarray:
    total = sum(b.size for b in blocks)
    params = np.zeros(total)
    for b in blocks:
        s = sl[b.name]
        if b.presolved is not None:
            value = np.atleast_1d(np.asarray(b.presolved, dtype=float))
            if value.shape != (b.size,):
                raise ConfigurationError(
                    f"block {b.name}: presolved value has wrong length")
            params[s] = value
            continue

        def block_mean(sub: np.ndarray, _s=s, _b=b) -> np.ndarray:
            trial = params.copy()
            trial[_s] = sub
            return _b.rows(trial).mean(axis=0)

        res = solve_estimating_equations(block_mean, params[s], linear=True)
        if not res.converged:
            raise ConvergenceError(
                f"estimating equations for '{b.name}' not solved "
                f"(residual {res.residual_norm:.2e})", stage=b.name)
        params[s] = res.params
    return params


def _stack_sandwich(blocks: Sequence[_Block], sl: dict[str, slice],
                    params: np.ndarray) -> VarianceReport:
    """Sandwich over the full stack, exploiting its triangular dependency:
    each block's rows read only its own and earlier parameter slices, so a
    perturbation of block j's parameters leaves every earlier block's mean
    exactly unchanged."""
    per_block = [b.rows(params) for b in blocks]
    scores = np.hstack(per_block)
    base_means = [r.mean(axis=0) for r in per_block]
    total = scores.shape[1]
    J = np.zeros((total, total))
    for jb, bj in enumerate(blocks):
        col0 = sl[bj.name].start
        for local in range(bj.size):
            j = col0 + local
            h = 1e-6 * max(1.0, abs(params[j]))
            trial = params.copy()
            trial[j] += h
            for ib in range(jb, len(blocks)):
                bi = blocks[ib]
                mean_i = bi.rows(trial).mean(axis=0)
                J[sl[bi.name], j] = (mean_i - base_means[ib]) / h
    return sandwich_variance(scores, J)


def _logistic_score_rows(X: np.ndarray, resp: np.ndarray, mask: np.ndarray,
                         coef: np.ndarray) -> np.ndarray:
    pr = expit(X @ coef)
    return X * (mask * (resp - pr))[:, None]


def _linear_score_rows(X: np.ndarray, resp: np.ndarray, mask: np.ndarray,
                       coef: np.ndarray) -> np.ndarray:
    return X * (mask * (resp - X @ coef))[:, None]


# ---------------------------------------------------------------------------
# shared design workspace and closed-form row kernels
# ---------------------------------------------------------------------------

def _clip01(p: np.ndarray) -> np.ndarray:
    return np.clip(p, WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR)


class _Workspace:
    """All design matrices for one dataset/config/spec, built once."""

    def __init__(self, ds: Dataset, config: ModelConfig,
                 spec: StructuralSpec) -> None:
        self.n = ds.n
        self.y, self.a, self.z, self.s = ds.y, ds.a, ds.z, ds.s
        self.X_tau = build_design(ds, config.tau_terms)
        self.X_alpha = build_design(ds, config.alpha_terms)
        self.B_rho = build_design(ds, config.rho_basis)
        z0 = _ColumnOverride(ds, z=0.0)
        z1 = _ColumnOverride(ds, z=1.0)
        self.E1 = build_design(ds, config.e1_terms)
        self.E1_0 = build_design(z0, config.e1_terms)
        self.E1_1 = build_design(z1, config.e1_terms)
        self.Bt = build_design(ds, config.e2_terms)
        self.E2_0 = build_design(z0, config.e2_terms)
        self.E2_1 = build_design(z1, config.e2_terms)
        self.B0 = build_design(ds, config.b0_basis)
        self.B1 = build_design(ds, config.b1_basis)
        self.Bb = build_design(ds, spec.beta_terms)
        self.E5 = build_design(ds, spec.instrument_index_terms)
        self.E5_0 = build_design(z0, spec.instrument_index_terms)
        self.E5_1 = build_design(z1, spec.instrument_index_terms)
        self.Mb = build_design(ds, spec.effect_basis)
        if config.q_basis is not None:
            self.Bq = build_design(ds, config.q_basis)
            self.E6 = build_design(ds, config.e6_terms)
        if config.pi_terms is not None:
            self.X_pi = build_design(ds, config.pi_terms)
        self.zs_idx = (ds.z + 2.0 * ds.s).astype(int)
        self.rows_idx = np.arange(ds.n)
        self.sign_zs = np.where((ds.z + ds.s) % 2 == 0, 1.0, -1.0)
        self.sign_az = np.where((ds.a + ds.z) % 2 == 0, 1.0, -1.0)

    # -- parameterised evaluations ---------------------------------------

    def tau_p(self, v: np.ndarray) -> np.ndarray:
        return _clip01(expit(self.X_tau @ v))

    def alpha_p(self, v: np.ndarray) -> np.ndarray:
        return _clip01(expit(self.X_alpha @ v))

    def s_given_z_obs(self, alpha_v: np.ndarray, rho_v: np.ndarray) -> np.ndarray:
        return expit(logit(self.alpha_p(alpha_v)) + self.z * (self.B_rho @ rho_v))

    def z_given_s1(self, tau_v: np.ndarray, rho_v: np.ndarray) -> np.ndarray:
        return expit(logit(self.tau_p(tau_v)) + self.B_rho @ rho_v)

    def signed_zs_weight(self, tau_v, alpha_v, rho_v) -> tuple[np.ndarray, np.ndarray]:
        cells = cells_zs(self.tau_p(tau_v), self.alpha_p(alpha_v),
                         self.B_rho @ rho_v)
        f = cells[self.rows_idx, self.zs_idx]
        return self.sign_zs / f, f

    def eps_star(self, psi, nu, th0, th1) -> np.ndarray:
        return (self.y - self.s * (self.Bb @ psi) - self.Bt @ nu
                - self.B0 @ th0 - self.s * (self.B1 @ th1))

    def eps_sb(self, eps_star, omega, pi_p) -> np.ndarray:
        """Subtract the centred selection-bias term on target rows."""
        return eps_star - self.s * (self.Bq @ omega) * (self.a - pi_p)

    def signed_az_weight(self, tau_v, rho_v, pi_p) -> tuple[np.ndarray, np.ndarray]:
        zt = self.z_given_s1(tau_v, rho_v)
        fz = np.where(self.z == 1.0, zt, 1.0 - zt)
        fa = np.where(self.a == 1.0, pi_p, 1.0 - pi_p)
        f = fz * fa
        return self.sign_az / f, f


def _effect_rows_core(ws: _Workspace, m_rows: np.ndarray,
                      h_rows: Optional[np.ndarray], tau_v, alpha_v, rho_v,
                      nu, th0, th1, psi, omega=None,
                      pi_v=None) -> np.ndarray:
    """Per-row effect-equation values; the single source for both the stack
    and the standalone (cross-fitting) evaluation paths."""
    sw, _ = ws.signed_zs_weight(tau_v, alpha_v, rho_v)
    es = ws.eps_star(psi, nu, th0, th1)
    rows = m_rows * (sw * es)[:, None]
    if h_rows is not None:
        pi_p = expit(ws.X_pi @ pi_v)
        eps = ws.eps_sb(es, omega, pi_p)
        saz, _ = ws.signed_az_weight(tau_v, rho_v, pi_p)
        rows = rows + h_rows * (ws.s * saz * eps)[:, None]
    return rows


def _index_rows(ds: Dataset, ws: _Workspace, spec: StructuralSpec,
                fn: Optional[Callable], what: str) -> np.ndarray:
    """Materialise a user index function c -> vector, or the default basis."""
    if fn is None:
        return ws.Mb
    rows = np.asarray([np.atleast_1d(np.asarray(fn(ds.c[i]), dtype=float))
                       for i in range(ds.n)])
    if rows.shape != (ds.n, spec.k):
        raise ConfigurationError(
            f"{what} must return vectors of length {spec.k}")
    return rows


# ---------------------------------------------------------------------------
# staged nuisance pipeline
# ---------------------------------------------------------------------------

def _norm_mode(mode) -> str:
    m = str(getattr(mode, "value", mode)).lower()
    if m not in ("nem", "nsm"):
        raise ConfigurationError(f"unknown mode {mode!r}; use 'nem' or 'nsm'")
    return m


def fit_nuisance_pipeline(dataset: Dataset, model_config: ModelConfig,
                          mode="nem") -> NuisanceSet:
    """Fit every nuisance in the staged order that preserves robustness.

    Stages: (1) component-law models by maximum likelihood; (2) odds ratio
    by its doubly robust equation; (3) trend and reference-level outcomes on
    reference rows, then the trend re-estimated with a centred index;
    (4) target shift and a preliminary effect with population-residual
    weights; under the selection-bias route additionally a propensity fit
    and the selection-bias coefficients.  A model for E(A | Z, S=1, C) is
    fitted whenever configured (used only by the efficient index functions).
    """
    mode = _norm_mode(mode)
    cfg = model_config
    spec = cfg.spec()
    if mode == "nsm" and (cfg.q_basis is None or cfg.pi_terms is None):
        raise ConfigurationError(
            "selection-bias mode needs q_basis and pi_terms configured")

    s0 = dataset.s == 0.0
    s1 = ~s0
    if not s0.any() or not s1.any():
        raise ConfigurationError("both population strata are required")

    def _stage(stage: str, fn):
        try:
            return fn()
        except ConvergenceError as exc:
            raise ConvergenceError(str(exc), stage=stage) from None

    tau = _stage("tau", lambda: fit_glm(
        dataset, s0, GLMSpec(Family.binomial_logit, cfg.tau_terms),
        response=dataset.z))
    alpha = _stage("alpha", lambda: fit_glm(
        dataset, dataset.z == 0.0, GLMSpec(Family.binomial_logit, cfg.alpha_terms),
        response=dataset.s))
    rho = estimate_rho(dataset, tau, alpha, cfg.e1_terms)

    ws = _Workspace(dataset, cfg, spec)
    knu, k0, k1, kpsi = (len(cfg.t_basis), len(cfg.b0_basis),
                         len(cfg.b1_basis), spec.k)
    ref = (1.0 - dataset.s)

    # stage 3: trend + reference level on reference rows
    def rows_3a(v: np.ndarray) -> np.ndarray:
        re = ref * (ws.y - ws.Bt @ v[:knu] - ws.B0 @ v[knu:])
        return np.hstack([ws.Bt * re[:, None], ws.B0 * re[:, None]])

    res3a = solve_estimating_equations(
        lambda v: rows_3a(v).mean(axis=0), np.zeros(knu + k0), linear=True)
    if not res3a.converged:
        raise ConvergenceError("reference-population outcome equations not "
                               f"solved (residual {res3a.residual_norm:.2e})",
                               stage="outcome_ref")
    nu_tilde, theta0 = res3a.params[:knu], res3a.params[knu:]

    tau_fix = ws.tau_p(tau.coefficients)
    E2bar = (1.0 - tau_fix)[:, None] * ws.E2_0 + tau_fix[:, None] * ws.E2_1
    E2c = ws.Bt - E2bar

    def rows_3b(v: np.ndarray) -> np.ndarray:
        re = ref * (ws.y - ws.Bt @ v - ws.B0 @ theta0)
        return E2c * re[:, None]

    res3b = solve_estimating_equations(
        lambda v: rows_3b(v).mean(axis=0), nu_tilde.copy(), linear=True)
    if not res3b.converged:
        raise ConvergenceError("centred trend equations not solved "
                               f"(residual {res3b.residual_norm:.2e})",
                               stage="trend")
    nu = res3b.params

    # stage 4: target shift + preliminary effect
    w4 = dataset.s - ws.s_given_z_obs(alpha.coefficients, rho)

    def rows_4(v: np.ndarray) -> np.ndarray:
        eps = ws.eps_star(v[k1:], nu, theta0, v[:k1])
        col = w4 * eps
        return np.hstack([ws.B1 * col[:, None], ws.E5 * col[:, None]])

    res4 = solve_estimating_equations(
        lambda v: rows_4(v).mean(axis=0), np.zeros(k1 + kpsi), linear=True)
    if not res4.converged:
        raise ConvergenceError("target-shift equations not solved "
                               f"(residual {res4.residual_norm:.2e})",
                               stage="target")
    theta1, psi_tilde = res4.params[:k1], res4.params[k1:]

    pi = omega = None
    if mode == "nsm":
        pi = _stage("propensity", lambda: fit_glm(
            dataset, s1, GLMSpec(Family.binomial_logit, cfg.pi_terms),
            response=dataset.a))
        pi_p = expit(ws.X_pi @ pi.coefficients)
        es_t = ws.eps_star(psi_tilde, nu, theta0, theta1)

        def rows_omega(v: np.ndarray) -> np.ndarray:
            return ws.E6 * ws.eps_sb(es_t, v, pi_p)[:, None]

        kq = len(cfg.q_basis)
        res_o = solve_estimating_equations(
            lambda v: rows_omega(v).mean(axis=0), np.zeros(kq), linear=True)
        if not res_o.converged:
            raise ConvergenceError("selection-bias equations not solved "
                                   f"(residual {res_o.residual_norm:.2e})",
                                   stage="selection")
        omega = res_o.params

    mu = None
    if cfg.mu_terms is not None:
        mu = _stage("treatment_mean", lambda: fit_glm(
            dataset, s1, GLMSpec(Family.binomial_logit, cfg.mu_terms),
            response=dataset.a))

    return NuisanceSet(cfg, tau, alpha, rho, nu, theta0, theta1, nu_tilde,
                       psi_tilde, pi=pi, omega=omega, mu=mu)


# ---------------------------------------------------------------------------
# shared block builders
# ---------------------------------------------------------------------------

def _check_spec(nuis: NuisanceSet, spec: Optional[StructuralSpec]) -> StructuralSpec:
    if spec is None:
        return nuis.config.spec()
    if tuple(spec.beta_terms) != tuple(nuis.config.beta_terms):
        raise ConfigurationError(
            "the structural form differs from the one the nuisances were "
            "fitted under")
    return spec


def _law_blocks(ws: _Workspace, sl: dict[str, slice],
                nuis: NuisanceSet) -> list[_Block]:
    """Score blocks for the two component laws and the odds ratio."""
    def rows_tau(p):
        return _logistic_score_rows(ws.X_tau, ws.z, ws.s == 0.0, p[sl["tau"]])

    def rows_alpha(p):
        return _logistic_score_rows(ws.X_alpha, ws.s, ws.z == 0.0, p[sl["alpha"]])

    def rows_rho(p):
        return rho_score_rows(ws.tau_p(p[sl["tau"]]), ws.alpha_p(p[sl["alpha"]]),
                              ws.B_rho @ p[sl["rho"]], ws.E1, ws.E1_0, ws.E1_1,
                              ws.z, ws.s)

    return [
        _Block("tau", ws.X_tau.shape[1], rows_tau, nuis.tau.coefficients),
        _Block("alpha", ws.X_alpha.shape[1], rows_alpha, nuis.alpha.coefficients),
        _Block("rho", ws.B_rho.shape[1], rows_rho, nuis.rho),
    ]


def _outcome_blocks(ws: _Workspace, sl: dict[str, slice], nuis: NuisanceSet,
                    knu: int, k0: int, k1: int) -> list[_Block]:
    """Score blocks for stages 3–4 of the pipeline (trend, levels, shift)."""
    ref = 1.0 - ws.s

    def rows_outcome_ref(p):
        v = p[sl["outcome_ref"]]
        re = ref * (ws.y - ws.Bt @ v[:knu] - ws.B0 @ v[knu:])
        return np.hstack([ws.Bt * re[:, None], ws.B0 * re[:, None]])

    def rows_trend(p):
        tp = ws.tau_p(p[sl["tau"]])
        E2bar = (1.0 - tp)[:, None] * ws.E2_0 + tp[:, None] * ws.E2_1
        th0 = p[sl["outcome_ref"]][knu:]
        re = ref * (ws.y - ws.Bt @ p[sl["trend"]] - ws.B0 @ th0)
        return (ws.Bt - E2bar) * re[:, None]

    def rows_target(p):
        w = ws.s - ws.s_given_z_obs(p[sl["alpha"]], p[sl["rho"]])
        v = p[sl["target"]]
        eps = ws.eps_star(v[k1:], p[sl["trend"]], p[sl["outcome_ref"]][knu:],
                          v[:k1])
        col = w * eps
        return np.hstack([ws.B1 * col[:, None], ws.E5 * col[:, None]])

    return [
        _Block("outcome_ref", knu + k0, rows_outcome_ref,
               np.concatenate([nuis.nu_tilde, nuis.theta0])),
        _Block("trend", knu, rows_trend, nuis.nu),
        _Block("target", k1 + ws.E5.shape[1], rows_target,
               np.concatenate([nuis.theta1, nuis.psi_tilde])),
    ]


def _extreme_count(ws: _Workspace, nuis: NuisanceSet, *, az: bool) -> int:
    _, f = ws.signed_zs_weight(nuis.tau.coefficients, nuis.alpha.coefficients,
                               nuis.rho)
    count = int(np.sum(f < WEIGHT_FLOOR))
    if az and nuis.pi is not None:
        pi_p = expit(ws.X_pi @ nuis.pi.coefficients)
        _, faz = ws.signed_az_weight(nuis.tau.coefficients, nuis.rho, pi_p)
        count += int(np.sum((ws.s == 1.0) & (faz < WEIGHT_FLOOR)))
    return count


# ---------------------------------------------------------------------------
# multiply robust estimators
# ---------------------------------------------------------------------------

def _estimate_mr(dataset: Dataset, nuis: NuisanceSet, spec: StructuralSpec,
                 m_rows: np.ndarray, h_rows: Optional[np.ndarray],
                 method: Method, joint_omega: bool = False) -> EstimateReport:
    cfg = nuis.config
    ws = _Workspace(dataset, cfg, spec)
    knu, k0, k1, kpsi = (len(cfg.t_basis), len(cfg.b0_basis),
                         len(cfg.b1_basis), spec.k)
    nsm = h_rows is not None
    if nsm and (nuis.pi is None or nuis.omega is None):
        raise ConfigurationError("selection-bias estimation needs a fitted "
                                 "propensity and selection-bias coefficients")

    sizes = [("tau", len(cfg.tau_terms)), ("alpha", len(cfg.alpha_terms)),
             ("rho", len(cfg.rho_basis)), ("outcome_ref", knu + k0),
             ("trend", knu), ("target", k1 + kpsi)]
    if nsm:
        kq = len(cfg.q_basis)
        sizes.append(("propensity", len(cfg.pi_terms)))
        if joint_omega:
            sizes.append(("effect", kq + kpsi))
        else:
            sizes.append(("selection", kq))
            sizes.append(("effect", kpsi))
    else:
        sizes.append(("effect", kpsi))
    sl = _slices(sizes)

    blocks = _law_blocks(ws, sl, nuis)
    blocks += _outcome_blocks(ws, sl, nuis, knu, k0, k1)

    if nsm:
        def rows_pi(p):
            return _logistic_score_rows(ws.X_pi, ws.a, ws.s == 1.0,
                                        p[sl["propensity"]])

        blocks.append(_Block("propensity", len(cfg.pi_terms), rows_pi,
                             nuis.pi.coefficients))

        def _omega_rows_at(p, omega_v):
            psi_t = p[sl["target"]][k1:]
            es = ws.eps_star(psi_t, p[sl["trend"]], p[sl["outcome_ref"]][knu:],
                             p[sl["target"]][:k1])
            pi_p = expit(ws.X_pi @ p[sl["propensity"]])
            return ws.E6 * ws.eps_sb(es, omega_v, pi_p)[:, None]

        if joint_omega:
            def rows_effect(p):
                v = p[sl["effect"]]
                omega_v, psi = v[:kq], v[kq:]
                core = _effect_rows_core(
                    ws, m_rows, h_rows, p[sl["tau"]], p[sl["alpha"]],
                    p[sl["rho"]], p[sl["trend"]], p[sl["outcome_ref"]][knu:],
                    p[sl["target"]][:k1], psi, omega_v, p[sl["propensity"]])
                return np.hstack([_omega_rows_at(p, omega_v), core])

            blocks.append(_Block("effect", kq + kpsi, rows_effect))
        else:
            def rows_omega(p):
                return _omega_rows_at(p, p[sl["selection"]])

            blocks.append(_Block("selection", kq, rows_omega, nuis.omega))

            def rows_effect(p):
                return _effect_rows_core(
                    ws, m_rows, h_rows, p[sl["tau"]], p[sl["alpha"]],
                    p[sl["rho"]], p[sl["trend"]], p[sl["outcome_ref"]][knu:],
                    p[sl["target"]][:k1], p[sl["effect"]],
                    p[sl["selection"]], p[sl["propensity"]])

            blocks.append(_Block("effect", kpsi, rows_effect))
    else:
        def rows_effect(p):
            return _effect_rows_core(
                ws, m_rows, None, p[sl["tau"]], p[sl["alpha"]], p[sl["rho"]],
                p[sl["trend"]], p[sl["outcome_ref"]][knu:],
                p[sl["target"]][:k1], p[sl["effect"]])

        blocks.append(_Block("effect", kpsi, rows_effect))

    params = _solve_stack(blocks, sl)
    var = _stack_sandwich(blocks, sl, params)
    eff = sl["effect"]
    psi = params[eff][-kpsi:]
    se = var.se[eff][-kpsi:]
    diagnostics = {
        "converged": True,
        "extreme_weight_rows": _extreme_count(ws, nuis, az=nsm),
        "parameters": params.shape[0],
    }
    return _report(psi, se, method, diagnostics)


def estimate_mr_nem(dataset: Dataset, nuis: NuisanceSet,
                    spec: Optional[StructuralSpec] = None,
                    m_fn: Optional[Callable] = None) -> EstimateReport:
    """Multiply robust effect estimate under no-effect-modification.

    Solves the index-weighted residual equations with the doubly-centred
    instrument/population weight; consistent when any one of the four
    modelling routes is correct.  ``m_fn`` maps a covariate vector to an
    index vector of the effect's dimension (default: the effect basis).
    """
    spec = _check_spec(nuis, spec)
    ws_m = _Workspace(dataset, nuis.config, spec)
    m_rows = _index_rows(dataset, ws_m, spec, m_fn, "m_fn")
    return _estimate_mr(dataset, nuis, spec, m_rows, None, Method.MR_NEM)


def estimate_mr_nsm(dataset: Dataset, nuis: NuisanceSet,
                    spec: Optional[StructuralSpec] = None,
                    m_fn: Optional[Callable] = None,
                    h_fn: Optional[Callable] = None, *,
                    joint_omega: bool = False) -> EstimateReport:
    """Multiply robust effect estimate under no-selection-modification.

    The effect equation adds the treatment/instrument-weighted residual rows
    (selection-bias-corrected) to the instrument/population rows and solves
    their sum; requires a correctly specified propensity model.  By default
    the selection-bias coefficients stay fixed at their pipeline values;
    ``joint_omega=True`` re-solves them jointly with the effect.
    """
    spec = _check_spec(nuis, spec)
    ws_m = _Workspace(dataset, nuis.config, spec)
    m_rows = _index_rows(dataset, ws_m, spec, m_fn, "m_fn")
    h_rows = _index_rows(dataset, ws_m, spec, h_fn, "h_fn")
    return _estimate_mr(dataset, nuis, spec, m_rows, h_rows, Method.MR_NSM,
                        joint_omega=joint_omega)


# ---------------------------------------------------------------------------
# efficient index functions
# ---------------------------------------------------------------------------

def _efficient_m_rows(dataset, ws: _Workspace, nuis: NuisanceSet,
                      spec: StructuralSpec) -> np.ndarray:
    if nuis.mu is None:
        raise ConfigurationError(
            "the efficient index needs a fitted model for the treatment "
            "mean given instrument and covariates (configure mu_terms)")
    law = nuis.law_zs()
    cells = law.cell_matrix(dataset)
    if np.any(cells <= 0.0):
        raise ConfigurationError("zero cell probability in the efficient index")
    w0 = (1.0 / cells).sum(axis=1)
    mu1 = nuis.mu.predict(dataset, z=1.0, s=1.0)
    mu0 = nuis.mu.predict(dataset, z=0.0, s=1.0)
    return ws.Mb * ((mu1 - mu0) / w0)[:, None]


def efficient_m_nem(c: Sequence[float], nuis: NuisanceSet,
                    law: JointLawZS) -> np.ndarray:
    """Variance-optimal index at one covariate value (homoscedastic form).

    Inverse total-inverse-cell weight times the instrument contrast of the
    treatment mean, scaled onto the effect basis.  Constant variance factors
    are dropped: they rescale the equations without moving the root.
    """
    if nuis.mu is None:
        raise ConfigurationError("efficient index needs the treatment-mean model")
    frame = CovariateFrame(np.asarray(c, dtype=float))
    cells = law.cell_matrix(frame)
    if np.any(cells <= 0.0):
        raise ConfigurationError("zero cell probability at this covariate value")
    w0 = float((1.0 / cells).sum())
    mu1 = float(nuis.mu.predict(frame, z=1.0, s=1.0)[0])
    mu0 = float(nuis.mu.predict(frame, z=0.0, s=1.0)[0])
    spec = nuis.config.spec()
    basis = build_design(frame, spec.effect_basis)[0]
    return (mu1 - mu0) / w0 * basis


def _signed_beta_gradient_sum(view, spec: StructuralSpec) -> np.ndarray:
    """Sum over the four (a,z) cells of sign(a,z) times the effect gradient."""
    out = 0.0
    for a_val in (0.0, 1.0):
        for z_val in (0.0, 1.0):
            sign = (-1.0) ** (a_val + z_val)
            D = build_design(_ColumnOverride(view, a=a_val, z=z_val, s=1.0),
                             spec.beta_terms)
            out = out + sign * D
    return out


def efficient_h_m_nsm(c: Sequence[float], nuis: NuisanceSet,
                      law_zs: JointLawZS,
                      law_az: JointLawAZ) -> tuple[np.ndarray, np.ndarray]:
    """Variance-optimal index pair under the selection-bias route.

    The first component matches :func:`efficient_m_nem`; the second is the
    inverse total-inverse-cell weight of the treatment/instrument law times
    the signed cell sum of the effect gradient (zero whenever the effect
    gradient is free of the instrument — the signed sum then cancels).
    """
    m = efficient_m_nem(c, nuis, law_zs)
    frame = CovariateFrame(np.asarray(c, dtype=float))
    cells = law_az.cell_matrix(frame)
    if np.any(cells <= 0.0):
        raise ConfigurationError("zero treatment/instrument cell at this "
                                 "covariate value")
    w1 = float((1.0 / cells).sum())
    spec = nuis.config.spec()
    grad_sum = _signed_beta_gradient_sum(frame, spec)[0]
    return m, grad_sum / w1


def estimate_mr_eff_nem(dataset: Dataset, nuis: NuisanceSet,
                        spec: Optional[StructuralSpec] = None) -> EstimateReport:
    """Multiply robust estimate with the variance-optimal index."""
    spec = _check_spec(nuis, spec)
    ws = _Workspace(dataset, nuis.config, spec)
    m_rows = _efficient_m_rows(dataset, ws, nuis, spec)
    report = _estimate_mr(dataset, nuis, spec, m_rows, None, Method.MR_EFF_NEM)
    return report


def estimate_mr_eff_nsm(dataset: Dataset, nuis: NuisanceSet,
                        spec: Optional[StructuralSpec] = None, *,
                        joint_omega: bool = False) -> EstimateReport:
    """Selection-bias-route estimate with the variance-optimal index pair."""
    spec = _check_spec(nuis, spec)
    if nuis.pi is None or nuis.omega is None:
        raise ConfigurationError("selection-bias estimation needs a fitted "
                                 "propensity and selection-bias coefficients")
    ws = _Workspace(dataset, nuis.config, spec)
    m_rows = _efficient_m_rows(dataset, ws, nuis, spec)
    law_az = nuis.law_az()
    cells = law_az.cell_matrix(dataset)
    if np.any(cells <= 0.0):
        raise ConfigurationError("zero treatment/instrument cell probability")
    w1 = (1.0 / cells).sum(axis=1)
    grad_sum = _signed_beta_gradient_sum(dataset, spec)
    h_rows = grad_sum / w1[:, None]
    return _estimate_mr(dataset, nuis, spec, m_rows, h_rows,
                        Method.MR_EFF_NSM, joint_omega=joint_omega)


# ---------------------------------------------------------------------------
# standalone effect-equation evaluation (cross-fitting hook)
# ---------------------------------------------------------------------------

def effect_score(dataset: Dataset, nuis: NuisanceSet,
                 spec: Optional[StructuralSpec], psi: np.ndarray, *,
                 mode="nem", m_fn: Optional[Callable] = None,
                 h_fn: Optional[Callable] = None,
                 efficient: bool = False) -> np.ndarray:
    """Per-row values of the final effect equation at fixed nuisances.

    This is exactly the row kernel the stacked estimators solve, exposed so
    fold-wise procedures can evaluate and solve it on data the nuisances
    were not trained on.
    """
    spec = _check_spec(nuis, spec)
    mode = _norm_mode(mode)
    ws = _Workspace(dataset, nuis.config, spec)
    if efficient:
        m_rows = _efficient_m_rows(dataset, ws, nuis, spec)
    else:
        m_rows = _index_rows(dataset, ws, spec, m_fn, "m_fn")
    h_rows = None
    omega = pi_v = None
    if mode == "nsm":
        if nuis.pi is None or nuis.omega is None:
            raise ConfigurationError("selection-bias scoring needs propensity "
                                     "and selection-bias fits")
        if efficient:
            law_az = nuis.law_az()
            w1 = (1.0 / law_az.cell_matrix(dataset)).sum(axis=1)
            h_rows = _signed_beta_gradient_sum(dataset, spec) / w1[:, None]
        else:
            h_rows = _index_rows(dataset, ws, spec, h_fn, "h_fn")
        omega, pi_v = nuis.omega, nuis.pi.coefficients
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    return _effect_rows_core(ws, m_rows, h_rows, nuis.tau.coefficients,
                             nuis.alpha.coefficients, nuis.rho, nuis.nu,
                             nuis.theta0, nuis.theta1, psi, omega, pi_v)


# ---------------------------------------------------------------------------
# comparator estimators
# ---------------------------------------------------------------------------

def estimate_tsls(dataset: Dataset, nuis: NuisanceSet,
                  spec: Optional[StructuralSpec] = None) -> EstimateReport:
    """Two-stage-least-squares-style estimator (outcome-model route only).

    Solves the instrument-indexed residual equations on target rows, with
    the trend and reference level from the plain (uncentred) reference-row
    fit and the population-residual weight replaced by the raw population
    label.  Consistent only when the outcome working models are right.
    """
    spec = _check_spec(nuis, spec)
    cfg = nuis.config
    ws = _Workspace(dataset, cfg, spec)
    knu, k0, k1, kpsi = (len(cfg.t_basis), len(cfg.b0_basis),
                         len(cfg.b1_basis), spec.k)
    sizes = [("outcome_ref", knu + k0), ("effect", k1 + kpsi)]
    sl = _slices(sizes)
    ref = 1.0 - ws.s

    def rows_outcome_ref(p):
        v = p[sl["outcome_ref"]]
        re = ref * (ws.y - ws.Bt @ v[:knu] - ws.B0 @ v[knu:])
        return np.hstack([ws.Bt * re[:, None], ws.B0 * re[:, None]])

    def rows_effect(p):
        v = p[sl["effect"]]
        o = p[sl["outcome_ref"]]
        eps = ws.eps_star(v[k1:], o[:knu], o[knu:], v[:k1])
        col = ws.s * eps
        return np.hstack([ws.B1 * col[:, None], ws.E5 * col[:, None]])

    blocks = [
        _Block("outcome_ref", knu + k0, rows_outcome_ref,
               np.concatenate([nuis.nu_tilde, nuis.theta0])),
        _Block("effect", k1 + kpsi, rows_effect),
    ]
    params = _solve_stack(blocks, sl)
    var = _stack_sandwich(blocks, sl, params)
    psi = params[sl["effect"]][-kpsi:]
    se = var.se[sl["effect"]][-kpsi:]
    return _report(psi, se, Method.TSLS, {"converged": True})


def estimate_g_z(dataset: Dataset, nuis: NuisanceSet,
                 spec: Optional[StructuralSpec] = None) -> EstimateReport:
    """G-estimator leaning on the instrument-given-population model.

    Centres the instrument index at its implied conditional mean in the
    target population; the outcome levels are dropped entirely (the
    centring absorbs any pure covariate function), so only the trend needs
    a model — itself re-fitted here without a reference level.
    """
    spec = _check_spec(nuis, spec)
    cfg = nuis.config
    s1 = dataset.s == 1.0
    zt = dataset.z[s1]
    if zt.size == 0 or np.all(zt == zt[0]):
        raise RelevanceError("the instrument does not vary in the target "
                             "population")
    ws = _Workspace(dataset, cfg, spec)
    knu, kpsi = len(cfg.t_basis), spec.k
    sizes = [("tau", len(cfg.tau_terms)), ("alpha", len(cfg.alpha_terms)),
             ("rho", len(cfg.rho_basis)), ("trend", knu), ("effect", kpsi)]
    sl = _slices(sizes)
    blocks = _law_blocks(ws, sl, nuis)
    ref = 1.0 - ws.s

    def rows_trend(p):
        tp = ws.tau_p(p[sl["tau"]])
        E2bar = (1.0 - tp)[:, None] * ws.E2_0 + tp[:, None] * ws.E2_1
        re = ref * (ws.y - ws.Bt @ p[sl["trend"]])
        return (ws.Bt - E2bar) * re[:, None]

    def rows_effect(p):
        zt1 = ws.z_given_s1(p[sl["tau"]], p[sl["rho"]])
        Mbar = (1.0 - zt1)[:, None] * ws.E5_0 + zt1[:, None] * ws.E5_1
        resid = ws.s * (ws.y - ws.s * (ws.Bb @ p[sl["effect"]])
                        - ws.Bt @ p[sl["trend"]])
        return (ws.E5 - Mbar) * resid[:, None]

    blocks.append(_Block("trend", knu, rows_trend))
    blocks.append(_Block("effect", kpsi, rows_effect))
    params = _solve_stack(blocks, sl)
    var = _stack_sandwich(blocks, sl, params)
    diagnostics = {"converged": True,
                   "extreme_weight_rows": _extreme_count(ws, nuis, az=False)}
    return _report(params[sl["effect"]], var.se[sl["effect"]], Method.GZ,
                   diagnostics)


def estimate_g_s(dataset: Dataset, nuis: NuisanceSet,
                 spec: Optional[StructuralSpec] = None) -> EstimateReport:
    """G-estimator leaning on the population-given-instrument model.

    The stage-4 equations with the trend and reference level dropped: the
    population-residual weight kills every function of instrument and
    covariates, so only the target shift needs a model.  The residual
    weight comes from one pooled maximum-likelihood logistic fit of the
    population label on the instrument main effect plus the population
    model's covariate terms.
    """
    spec = _check_spec(nuis, spec)
    cfg = nuis.config
    ws = _Workspace(dataset, cfg, spec)
    k1, kpsi = len(cfg.b1_basis), spec.k
    assoc_terms = (term(special=("z",)),) + tuple(cfg.alpha_terms)
    assoc = fit_glm(dataset, np.ones(ws.n, dtype=bool),
                    GLMSpec(Family.binomial_logit, assoc_terms),
                    response=dataset.s)
    X_assoc = build_design(dataset, assoc_terms)
    sizes = [("assoc", len(assoc_terms)), ("effect", k1 + kpsi)]
    sl = _slices(sizes)
    everyone = np.ones(ws.n)

    def rows_assoc(p):
        return _logistic_score_rows(X_assoc, ws.s, everyone, p[sl["assoc"]])

    def rows_effect(p):
        w = ws.s - expit(X_assoc @ p[sl["assoc"]])
        v = p[sl["effect"]]
        resid = (ws.y - ws.s * (ws.Bb @ v[k1:]) - ws.s * (ws.B1 @ v[:k1]))
        col = w * resid
        return np.hstack([ws.B1 * col[:, None], ws.E5 * col[:, None]])

    blocks = [
        _Block("assoc", len(assoc_terms), rows_assoc, assoc.coefficients),
        _Block("effect", k1 + kpsi, rows_effect),
    ]
    params = _solve_stack(blocks, sl)
    var = _stack_sandwich(blocks, sl, params)
    psi = params[sl["effect"]][-kpsi:]
    se = var.se[sl["effect"]][-kpsi:]
    return _report(psi, se, Method.GS, {"converged": True})


def estimate_ipw(dataset: Dataset, nuis: NuisanceSet,
                 spec: Optional[StructuralSpec] = None) -> EstimateReport:
    """Inverse-weighting estimator leaning entirely on the joint law.

    The signed inverse weight is applied to the raw effect-subtracted
    outcome; no outcome nuisances at all.  The joint instrument/population
    density factorises as the population-given-instrument probability
    (odds-ratio parameterisation) times an instrument margin, the latter
    fitted by pooled maximum likelihood on the instrument model's
    covariate terms.
    """
    spec = _check_spec(nuis, spec)
    cfg = nuis.config
    ws = _Workspace(dataset, cfg, spec)
    kpsi = spec.k
    margin = fit_glm(dataset, np.ones(ws.n, dtype=bool),
                     GLMSpec(Family.binomial_logit, tuple(cfg.tau_terms)),
                     response=dataset.z)
    sizes = [("tau", len(cfg.tau_terms)), ("alpha", len(cfg.alpha_terms)),
             ("rho", len(cfg.rho_basis)), ("margin", len(cfg.tau_terms)),
             ("effect", kpsi)]
    sl = _slices(sizes)
    blocks = _law_blocks(ws, sl, nuis)
    everyone = np.ones(ws.n)

    def joint_density(p):
        ps1 = ws.s_given_z_obs(p[sl["alpha"]], p[sl["rho"]])
        f_s = np.where(ws.s == 1.0, ps1, 1.0 - ps1)
        pz1 = _clip01(expit(ws.X_tau @ p[sl["margin"]]))
        f_z = np.where(ws.z == 1.0, pz1, 1.0 - pz1)
        return f_s * f_z

    def rows_margin(p):
        return _logistic_score_rows(ws.X_tau, ws.z, everyone, p[sl["margin"]])

    def rows_effect(p):
        resid = ws.y - ws.s * (ws.Bb @ p[sl["effect"]])
        return ws.Mb * (ws.sign_zs / joint_density(p) * resid)[:, None]

    blocks.append(_Block("margin", len(cfg.tau_terms), rows_margin,
                         margin.coefficients))
    blocks.append(_Block("effect", kpsi, rows_effect))
    params = _solve_stack(blocks, sl)
    var = _stack_sandwich(blocks, sl, params)
    diagnostics = {"converged": True,
                   "extreme_weight_rows": int(np.sum(joint_density(params)
                                                     < WEIGHT_FLOOR))}
    return _report(params[sl["effect"]], var.se[sl["effect"]], Method.IPW,
                   diagnostics)


# ---------------------------------------------------------------------------
# confounded benchmark
# ---------------------------------------------------------------------------

def _pairwise_adjustment_terms(p: int) -> tuple[Term, ...]:
    terms: list[Term] = [intercept(), term(special=("z",))]
    terms += [term(c=(j,)) for j in range(p)]
    terms += [term(c=(i, j)) for i in range(p) for j in range(i + 1, p)]
    return tuple(terms)


def benchmark_dr_gest(dataset: Dataset,
                      spec: Optional[StructuralSpec] = None) -> EstimateReport:
    """Doubly robust g-estimator under conditional exchangeability.

    Fitted on target-population rows only, adjusting for the instrument and
    covariates as if that sufficed for confounding control.  It does not —
    this estimator is the cautionary benchmark, not a recommendation.
    """
    if spec is None:
        spec = StructuralSpec((term(special=("a",)),))
    s1 = dataset.s == 1.0
    if not s1.any():
        raise ConfigurationError("no target-population rows")
    adjust = _pairwise_adjustment_terms(dataset.p)
    out_terms = spec.beta_terms + adjust
    e_fit = fit_glm(dataset, s1, GLMSpec(Family.binomial_logit, adjust),
                    response=dataset.a)
    o_fit = fit_glm(dataset, s1, GLMSpec(Family.linear_identity, out_terms))

    X_e = build_design(dataset, adjust)
    X_o = build_design(dataset, out_terms)
    X_o0 = build_design(_ColumnOverride(dataset, a=0.0), out_terms)
    Bb = build_design(dataset, spec.beta_terms)
    Mb = build_design(dataset, spec.effect_basis)
    kpsi = spec.k
    sizes = [("exposure", X_e.shape[1]), ("outcome", X_o.shape[1]),
             ("effect", kpsi)]
    sl = _slices(sizes)

    def rows_exposure(p):
        return _logistic_score_rows(X_e, dataset.a, s1, p[sl["exposure"]])

    def rows_outcome(p):
        return _linear_score_rows(X_o, dataset.y, s1, p[sl["outcome"]])

    def rows_effect(p):
        ehat = expit(X_e @ p[sl["exposure"]])
        q0 = X_o0 @ p[sl["outcome"]]
        resid = dataset.y - Bb @ p[sl["effect"]] - q0
        return Mb * (s1 * (dataset.a - ehat) * resid)[:, None]

    blocks = [
        _Block("exposure", X_e.shape[1], rows_exposure, e_fit.coefficients),
        _Block("outcome", X_o.shape[1], rows_outcome, o_fit.coefficients),
        _Block("effect", kpsi, rows_effect),
    ]
    params = _solve_stack(blocks, sl)
    var = _stack_sandwich(blocks, sl, params)
    return _report(params[sl["effect"]], var.se[sl["effect"]],
                   Method.DR_GEST_BENCHMARK, {"converged": True})


# ---------------------------------------------------------------------------
# two-period (panel) estimators
# ---------------------------------------------------------------------------

def _default_main_terms(p: int) -> tuple[Term, ...]:
    return (intercept(),) + tuple(term(c=(j,)) for j in range(p))


@dataclass
class DidNuisanceSet:
    """Fitted pieces for the panel selection-bias estimator."""

    z_model: FittedModel          # f(Z=1 | C)
    propensity: FittedModel       # f(A=1 | Z, C)
    nu: np.ndarray                # first-period trend coefficients
    theta0: np.ndarray            # first-period level coefficients
    theta_bar: np.ndarray         # trend-difference coefficients (prelim fit)
    psi_tilde: np.ndarray         # preliminary effect (difference route)
    omega: np.ndarray             # selection-bias coefficients
    effect_terms: tuple[Term, ...]
    level_basis: tuple[Term, ...]
    t_basis: tuple[Term, ...]
    q_basis: tuple[Term, ...]
    pi_terms: tuple[Term, ...]
    z_terms: tuple[Term, ...]


def estimate_did_nem(panel: PanelDataset, *,
                     effect_terms: Optional[Sequence[Term]] = None,
                     level_basis: Optional[Sequence[Term]] = None,
                     z_terms: Optional[Sequence[Term]] = None) -> EstimateReport:
    """Panel effect estimate from outcome differences.

    One centred-instrument equation for the effect plus least-squares rows
    for the trend-difference level; unbiased when either the instrument
    model or the level model is right.
    """
    spec = StructuralSpec(tuple(effect_terms) if effect_terms
                          else (term(special=("a",)),))
    level = tuple(level_basis) if level_basis else _default_main_terms(panel.p)
    zt = tuple(z_terms) if z_terms else _default_main_terms(panel.p)
    dy = panel.y1 - panel.y0
    kpsi, kl = spec.k, len(level)

    z_fit = fit_glm(panel, None, GLMSpec(Family.binomial_logit, zt),
                    response=panel.z)
    X_z = build_design(panel, zt)
    Bb = build_design(panel, spec.beta_terms)
    Mb = build_design(panel, spec.effect_basis)
    Bl = build_design(panel, level)
    sizes = [("z_model", X_z.shape[1]), ("effect", kpsi + kl)]
    sl = _slices(sizes)
    ones = np.ones(panel.n, dtype=bool)

    def rows_z(p):
        return _logistic_score_rows(X_z, panel.z, ones, p[sl["z_model"]])

    def rows_effect(p):
        v = p[sl["effect"]]
        zp = expit(X_z @ p[sl["z_model"]])
        resid = dy - Bb @ v[:kpsi] - Bl @ v[kpsi:]
        return np.hstack([Mb * ((panel.z - zp) * resid)[:, None],
                          Bl * resid[:, None]])

    blocks = [
        _Block("z_model", X_z.shape[1], rows_z, z_fit.coefficients),
        _Block("effect", kpsi + kl, rows_effect),
    ]
    params = _solve_stack(blocks, sl)
    var = _stack_sandwich(blocks, sl, params)
    psi = params[sl["effect"]][:kpsi]
    se = var.se[sl["effect"]][:kpsi]
    return _report(psi, se, Method.DID_NEM, {"converged": True})


def fit_did_nuisances(panel: PanelDataset, *,
                      effect_terms: Optional[Sequence[Term]] = None,
                      level_basis: Optional[Sequence[Term]] = None,
                      t_basis: Optional[Sequence[Term]] = None,
                      q_basis: Optional[Sequence[Term]] = None,
                      pi_terms: Optional[Sequence[Term]] = None,
                      z_terms: Optional[Sequence[Term]] = None) -> DidNuisanceSet:
    """Fit the panel selection-bias nuisances in dependency order."""
    spec = StructuralSpec(tuple(effect_terms) if effect_terms
                          else (term(special=("a",)),))
    p = panel.p
    level = tuple(level_basis) if level_basis else _default_main_terms(p)
    tb = tuple(t_basis) if t_basis else _default_main_terms(p)
    qb = tuple(q_basis) if q_basis else _default_main_terms(p)
    pit = tuple(pi_terms) if pi_terms else \
        (intercept(), term(special=("z",))) + tuple(term(c=(j,)) for j in range(p))
    zt = tuple(z_terms) if z_terms else _default_main_terms(p)

    z_fit = fit_glm(panel, None, GLMSpec(Family.binomial_logit, zt),
                    response=panel.z)
    pi_fit = fit_glm(panel, None, GLMSpec(Family.binomial_logit, pit),
                     response=panel.a)

    # first-period outcome: level + trend (plain least squares rows)
    t_terms = tuple(t.with_special("z") for t in tb)
    out_terms = level + t_terms
    o_fit = fit_glm(panel, None, GLMSpec(Family.linear_identity, out_terms),
                    response=panel.y0)
    theta0 = o_fit.coefficients[:len(level)]
    nu = o_fit.coefficients[len(level):]

    # preliminary effect and trend-difference from the difference route
    prelim = estimate_did_nem(panel, effect_terms=spec.beta_terms,
                              level_basis=level, z_terms=zt)
    dy = panel.y1 - panel.y0
    Bb = build_design(panel, spec.beta_terms)
    Bl = build_design(panel, level)
    X_z = build_design(panel, zt)
    zp = expit(X_z @ z_fit.coefficients)
    Mb = build_design(panel, spec.effect_basis)

    def prelim_rows(v):
        resid = dy - Bb @ v[:spec.k] - Bl @ v[spec.k:]
        return np.hstack([Mb * ((panel.z - zp) * resid)[:, None],
                          Bl * resid[:, None]])

    res = solve_estimating_equations(
        lambda v: prelim_rows(v).mean(axis=0),
        np.zeros(spec.k + len(level)), linear=True)
    if not res.converged:
        raise ConvergenceError("preliminary panel equations not solved",
                               stage="panel_prelim")
    psi_tilde = res.params[:spec.k]
    theta_bar = res.params[spec.k:]

    # selection-bias coefficients from the second-period residual
    if len(theta_bar) != len(theta0):
        raise ConfigurationError(
            "level and trend-difference bases must match to recover the "
            "second-period level")
    theta1_star = theta_bar + theta0
    Bt = build_design(panel, t_terms)
    Bq = build_design(panel, qb)
    E6 = build_design(panel, tuple(t.with_special("a") for t in qb))
    pi_p = expit(build_design(panel, pit) @ pi_fit.coefficients)
    base = (panel.y1 - Bb @ psi_tilde - Bt @ nu - Bl @ theta1_star)

    def omega_rows(v):
        resid = base - (Bq @ v) * (panel.a - pi_p)
        return E6 * resid[:, None]

    res_o = solve_estimating_equations(
        lambda v: omega_rows(v).mean(axis=0), np.zeros(len(qb)), linear=True)
    if not res_o.converged:
        raise ConvergenceError("panel selection-bias equations not solved",
                               stage="panel_selection")

    return DidNuisanceSet(z_fit, pi_fit, nu, theta0, theta_bar, psi_tilde,
                          res_o.params, spec.beta_terms, level, tb, qb, pit, zt)


def estimate_did_nsm(panel: PanelDataset,
                     nuis: Optional[DidNuisanceSet] = None,
                     **term_kwargs) -> EstimateReport:
    """Panel effect estimate under the selection-bias route.

    Adds the signed treatment/instrument-weighted second-period residual to
    the centred-instrument difference equation and solves the sum; requires
    the panel propensity model.  Nuisances are fitted on the panel itself
    when not supplied.
    """
    if nuis is None:
        nuis = fit_did_nuisances(panel, **term_kwargs)
    elif term_kwargs:
        raise ConfigurationError("pass either fitted panel nuisances or term "
                                 "lists, not both")
    spec = StructuralSpec(nuis.effect_terms)
    kpsi = spec.k
    kl = len(nuis.level_basis)
    kq = len(nuis.q_basis)
    dy = panel.y1 - panel.y0

    X_z = build_design(panel, nuis.z_terms)
    X_pi = build_design(panel, nuis.pi_terms)
    Bb = build_design(panel, spec.beta_terms)
    Mb = build_design(panel, spec.effect_basis)
    Bl = build_design(panel, nuis.level_basis)
    t_terms = tuple(t.with_special("z") for t in nuis.t_basis)
    Bt = build_design(panel, t_terms)
    Bq = build_design(panel, nuis.q_basis)
    E6 = build_design(panel, tuple(t.with_special("a") for t in nuis.q_basis))
    out_terms = nuis.level_basis + t_terms
    X_o = build_design(panel, out_terms)
    sign_az = np.where((panel.a + panel.z) % 2 == 0, 1.0, -1.0)
    ones = np.ones(panel.n, dtype=bool)
    kt = len(nuis.t_basis)

    sizes = [("z_model", X_z.shape[1]), ("propensity", X_pi.shape[1]),
             ("outcome0", kl + kt), ("prelim", kpsi + kl),
             ("selection", kq), ("effect", kpsi)]
    sl = _slices(sizes)

    def rows_z(p):
        return _logistic_score_rows(X_z, panel.z, ones, p[sl["z_model"]])

    def rows_pi(p):
        return _logistic_score_rows(X_pi, panel.a, ones, p[sl["propensity"]])

    def rows_outcome0(p):
        return _linear_score_rows(X_o, panel.y0, ones, p[sl["outcome0"]])

    def rows_prelim(p):
        zp = expit(X_z @ p[sl["z_model"]])
        v = p[sl["prelim"]]
        resid = dy - Bb @ v[:kpsi] - Bl @ v[kpsi:]
        return np.hstack([Mb * ((panel.z - zp) * resid)[:, None],
                          Bl * resid[:, None]])

    def _second_period_resid(p, psi, omega_v):
        o = p[sl["outcome0"]]
        th0, nu_v = o[:kl], o[kl:]
        th1s = p[sl["prelim"]][kpsi:] + th0
        pi_p = expit(X_pi @ p[sl["propensity"]])
        return (panel.y1 - Bb @ psi - (Bq @ omega_v) * (panel.a - pi_p)
                - Bt @ nu_v - Bl @ th1s), pi_p

    def rows_selection(p):
        resid, _ = _second_period_resid(p, p[sl["prelim"]][:kpsi],
                                        p[sl["selection"]])
        return E6 * resid[:, None]

    def rows_effect(p):
        psi = p[sl["effect"]]
        zp = expit(X_z @ p[sl["z_model"]])
        v = p[sl["prelim"]]
        resid1 = dy - Bb @ psi - Bl @ v[kpsi:]
        row1 = Mb * ((panel.z - zp) * resid1)[:, None]
        resid2, pi_p = _second_period_resid(p, psi, p[sl["selection"]])
        fz = np.where(panel.z == 1.0, zp, 1.0 - zp)
        fa = np.where(panel.a == 1.0, pi_p, 1.0 - pi_p)
        row2 = Mb * (sign_az / (fz * fa) * resid2)[:, None]
        return row1 + row2

    blocks = [
        _Block("z_model", X_z.shape[1], rows_z, nuis.z_model.coefficients),
        _Block("propensity", X_pi.shape[1], rows_pi,
               nuis.propensity.coefficients),
        _Block("outcome0", kl + kt, rows_outcome0,
               np.concatenate([nuis.theta0, nuis.nu])),
        _Block("prelim", kpsi + kl, rows_prelim,
               np.concatenate([nuis.psi_tilde, nuis.theta_bar])),
        _Block("selection", kq, rows_selection, nuis.omega),
        _Block("effect", kpsi, rows_effect),
    ]
    params = _solve_stack(blocks, sl)
    var = _stack_sandwich(blocks, sl, params)
    return _report(params[sl["effect"]], var.se[sl["effect"]],
                   Method.DID_NSM, {"converged": True})
