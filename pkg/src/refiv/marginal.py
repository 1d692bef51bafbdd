"""Marginal treatment effect on the treated, nonparametrically.

The marginal effect is a smooth functional of the observed-data law with a
closed-form representation: the covariate-conditional effect averaged over
treated target-population rows.  One-step estimators built on its influence
function stay unbiased when only some working-model components are correct
(five interchangeable component sets on the primary route, three on the
selection-bias route with a correct propensity throughout).

Everything here treats the fitted nuisance components as plug-in callables:
the estimators are linear in the parameter, solve in closed form, and report
the influence-function plug-in standard error.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import (CovariateFrame, Dataset, Family, GLMSpec, Term,
                   build_design, intercept, term)
from .errors import (ConfigurationError, ExtremeWeightWarning, RelevanceError)
from .fitting import FittedModel, bootstrap_se, expit, fit_glm
from .jointlaw import WEIGHT_FLOOR, JointLawZS, estimate_rho
from .estimators import EstimateReport, Method, _report

RELEVANCE_FLOOR = 1e-6

CArray = np.ndarray
VectorFn = Callable[[CArray], np.ndarray]            # cmat -> (n,)
IndexedFn = Callable[[object, CArray], np.ndarray]   # (level, cmat) -> (n,)


@dataclass
class MarginalNuisance:
    """Plug-in components for the marginal-effect influence functions.

    All callables are vectorised over a covariate matrix of shape (n, p):

    * ``beta_c(cmat)``     — conditional effect function.
    * ``gamma_c(cmat)``    — selection-bias function (second route only).
    * ``t1(cmat)``         — instrument-outcome trend at instrument one.
    * ``y_z0(s, cmat)``    — outcome mean at instrument zero by population.
    * ``y_a0z0(cmat)``     — untreated outcome mean at instrument zero in the
      target population (second route only).
    * ``prop_a(z, cmat)``  — treatment probability given instrument, target.
    * ``law_zs``           — fitted instrument/population joint law.
    * ``s_margin(cmat)``   — target-population probability; defaults to the
      one implied by ``law_zs`` but kept separate so the population margin
      can be modelled (or mis-modelled) on its own.
    """

    beta_c: Optional[VectorFn]
    t1: VectorFn
    y_z0: IndexedFn
    prop_a: IndexedFn
    law_zs: JointLawZS
    s_margin: Optional[VectorFn] = None
    gamma_c: Optional[VectorFn] = None
    y_a0z0: Optional[VectorFn] = None

    def population_margin(self, cmat: CArray) -> np.ndarray:
        if self.s_margin is not None:
            return np.clip(np.asarray(self.s_margin(cmat), dtype=float),
                           WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR)
        frame = CovariateFrame(cmat)
        return self.law_zs.s_marginal(frame)


# ---------------------------------------------------------------------------
# pointwise identification formulas
# ---------------------------------------------------------------------------

def _as_cmat(c: Sequence[float]) -> CArray:
    arr = np.asarray(c, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return arr


def delta_a(c: Sequence[float], prop_a: IndexedFn) -> float:
    """Instrument contrast of the treatment probability at one covariate value."""
    cmat = _as_cmat(c)
    return float(prop_a(1.0, cmat)[0] - prop_a(0.0, cmat)[0])


def delta_y(c: Sequence[float], y_s1: IndexedFn) -> float:
    """Instrument contrast of the target-population outcome mean."""
    cmat = _as_cmat(c)
    return float(y_s1(1.0, cmat)[0] - y_s1(0.0, cmat)[0])


def _guard_relevance(d_a: float, c: Sequence[float]) -> None:
    if abs(d_a) < RELEVANCE_FLOOR:
        raise RelevanceError(
            "instrument does not move the treatment probability at "
            f"covariate value {np.asarray(c, dtype=float).tolist()}")


def beta_c(c: Sequence[float], y_s1: IndexedFn, t1: VectorFn,
           prop_a: IndexedFn) -> float:
    """Conditional effect at one covariate value: trend-corrected outcome
    contrast divided by the treatment contrast."""
    cmat = _as_cmat(c)
    d_a = delta_a(c, prop_a)
    _guard_relevance(d_a, c)
    return (delta_y(c, y_s1) - float(t1(cmat)[0])) / d_a


def gamma_c(c: Sequence[float], y_a0: IndexedFn, t1: VectorFn,
            prop_a: IndexedFn) -> float:
    """Selection-bias function at one covariate value: negative of the
    trend-corrected untreated-outcome contrast over the treatment contrast."""
    cmat = _as_cmat(c)
    d_a = delta_a(c, prop_a)
    _guard_relevance(d_a, c)
    d_y0 = float(y_a0(1.0, cmat)[0] - y_a0(0.0, cmat)[0])
    return -(d_y0 - float(t1(cmat)[0])) / d_a


# ---------------------------------------------------------------------------
# influence-function values
# ---------------------------------------------------------------------------

def _common_pieces(dataset: Dataset, nuis: MarginalNuisance):
    cmat = dataset.c
    n = dataset.n
    frame = CovariateFrame(cmat)
    p1 = np.asarray(nuis.prop_a(1.0, cmat), dtype=float)
    p0 = np.asarray(nuis.prop_a(0.0, cmat), dtype=float)
    d_a = p1 - p0
    bad = np.abs(d_a) < RELEVANCE_FLOOR
    if bad.any():
        i = int(np.argmax(bad))
        raise RelevanceError(
            "instrument does not move the treatment probability at "
            f"covariate value {cmat[i].tolist()} (row {i})")
    # instrument law given population, composed with the population margin
    z1_s = np.column_stack([
        np.asarray(nuis.law_zs.z_given_s(frame, s=0.0), dtype=float),
        np.asarray(nuis.law_zs.z_given_s(frame, s=1.0), dtype=float),
    ])
    sm = np.asarray(nuis.population_margin(cmat), dtype=float)
    s_idx = dataset.s.astype(int)
    z1_obs = z1_s[np.arange(n), s_idx]
    fz = np.where(dataset.z == 1.0, z1_obs, 1.0 - z1_obs)
    fs = np.where(dataset.s == 1.0, sm, 1.0 - sm)
    f_zs = fz * fs
    extreme = int(np.sum(f_zs < WEIGHT_FLOOR))
    f_zs = np.clip(f_zs, WEIGHT_FLOOR, None)
    # treated-and-target probability given covariates, from the components
    fa1s1_c = sm * (p0 * (1.0 - z1_s[:, 1]) + p1 * z1_s[:, 1])
    fa1s1 = float(np.mean(dataset.a * dataset.s))
    if fa1s1 <= 0.0:
        raise ConfigurationError("no treated target-population rows")
    t1v = np.asarray(nuis.t1(cmat), dtype=float)
    return cmat, p1, p0, d_a, f_zs, fa1s1_c, fa1s1, t1v, extreme


def eif1_values(dataset: Dataset, nuis: MarginalNuisance,
                psi_star: float) -> np.ndarray:
    """Per-row influence-function values on the primary route."""
    if nuis.beta_c is None:
        raise ConfigurationError("the primary route needs the conditional "
                                 "effect function beta_c")
    (cmat, p1, p0, d_a, f_zs, fa1s1_c, fa1s1, t1v,
     extreme) = _common_pieces(dataset, nuis)
    if extreme:
        warnings.warn(f"{extreme} rows with instrument/population cell "
                      "probability below the floor", ExtremeWeightWarning,
                      stacklevel=2)
    beta = np.asarray(nuis.beta_c(cmat), dtype=float)
    y0s = np.asarray(nuis.y_z0(dataset.s, cmat), dtype=float)
    sign = np.where((dataset.z + dataset.s) % 2 == 0, 1.0, -1.0)
    w = fa1s1_c * sign / (fa1s1 * d_a * f_zs)
    bracket = (dataset.y - beta * (dataset.a - p0) * dataset.s
               - t1v * dataset.z - y0s)
    return (w * bracket
            + dataset.a * dataset.s * (beta - psi_star) / fa1s1)


def eif2_values(dataset: Dataset, nuis: MarginalNuisance,
                psi_star: float) -> np.ndarray:
    """Per-row influence-function values on the selection-bias route."""
    if nuis.gamma_c is None or nuis.y_a0z0 is None:
        raise ConfigurationError("the selection-bias route needs gamma_c and "
                                 "the untreated outcome model y_a0z0")
    (cmat, p1, p0, d_a, f_zs, fa1s1_c, fa1s1, t1v,
     extreme) = _common_pieces(dataset, nuis)
    pz = np.where(dataset.z == 1.0, p1, p0)          # f(A=1 | Z, S=1, C)
    pa0 = 1.0 - pz                                    # f(A=0 | Z, S=1, C)
    extreme += int(np.sum((dataset.s == 1.0) & (pa0 < WEIGHT_FLOOR)))
    if extreme:
        warnings.warn(f"{extreme} rows with extreme cell probabilities",
                      ExtremeWeightWarning, stacklevel=2)
    pa0 = np.clip(pa0, WEIGHT_FLOOR, None)
    gam = np.asarray(nuis.gamma_c(cmat), dtype=float)
    y00 = np.asarray(nuis.y_a0z0(cmat), dtype=float)
    y0_ref = np.asarray(nuis.y_z0(np.zeros(dataset.n), cmat), dtype=float)
    a, z, s, y = dataset.a, dataset.z, dataset.s, dataset.y
    R = y + gam * d_a * z - t1v * z - y00
    w2 = fa1s1_c * (2.0 * z - 1.0) / (fa1s1 * d_a * f_zs)
    inner = ((1.0 - a) * s / pa0 * R
             + s * (a - pz) * gam
             - (1.0 - s) * (y - t1v * z - y0_ref))
    return (w2 * inner
            - (1.0 - a) * s * pz / (fa1s1 * pa0) * R
            + a * s / fa1s1 * (R - gam - psi_star))


# ---------------------------------------------------------------------------
# one-step estimators
# ---------------------------------------------------------------------------

def _solve_linear_eif(values_fn: Callable[[float], np.ndarray]) -> tuple[float, np.ndarray]:
    """Solve mean values(psi) = 0 for a function exactly linear in psi."""
    v0 = values_fn(0.0)
    v1 = values_fn(1.0)
    slope = float(np.mean(v1 - v0))
    if abs(slope) < 1e-12:
        raise ConfigurationError("degenerate estimating function: no "
                                 "treated target-population contribution")
    psi = -float(np.mean(v0)) / slope
    return psi, values_fn(psi)


def _finish(dataset: Dataset, psi: float, values: np.ndarray, method: Method,
            nuis: MarginalNuisance, *, bootstrap: Optional[int],
            refit: Optional[Callable[[Dataset], MarginalNuisance]],
            seed: int, diagnostics: dict) -> EstimateReport:
    se = float(np.sqrt(np.mean(values ** 2) / dataset.n))
    if bootstrap is not None:
        point = (estimate_np_att_nem if method is Method.NP_ATT_NEM
                 else estimate_np_att_nsm)

        def one(ds: Dataset) -> np.ndarray:
            nu_b = refit(ds) if refit is not None else nuis
            return point(ds, nu_b).psi_hat

        boot = bootstrap_se(one, dataset, bootstrap, seed)
        diagnostics["bootstrap_se"] = float(boot.se[0])
        diagnostics["bootstrap_failures"] = boot.failed_replicates
    return _report(np.array([psi]), np.array([se]), method, diagnostics)


def estimate_np_att_nem(dataset: Dataset, nuis: MarginalNuisance, *,
                        bootstrap: Optional[int] = None,
                        refit: Optional[Callable[[Dataset], MarginalNuisance]] = None,
                        seed: int = 0) -> EstimateReport:
    """One-step marginal-effect estimate on the primary route.

    The estimating function is linear in the parameter, so the root is a
    closed-form ratio; the reported SE treats nuisances as fixed.  Pass
    ``bootstrap=B`` (optionally with a ``refit`` trainer) for a resampled SE
    alongside.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtremeWeightWarning)
        psi, values = _solve_linear_eif(
            lambda p: eif1_values(dataset, nuis, p))
    diagnostics = {"converged": True,
                   "n_treated_target": int(np.sum(dataset.a * dataset.s))}
    return _finish(dataset, psi, values, Method.NP_ATT_NEM, nuis,
                   bootstrap=bootstrap, refit=refit, seed=seed,
                   diagnostics=diagnostics)


def estimate_np_att_nsm(dataset: Dataset, nuis: MarginalNuisance, *,
                        bootstrap: Optional[int] = None,
                        refit: Optional[Callable[[Dataset], MarginalNuisance]] = None,
                        seed: int = 0) -> EstimateReport:
    """One-step marginal-effect estimate on the selection-bias route.

    Requires the treatment-propensity component throughout, plus the
    selection-bias function and the untreated outcome model.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExtremeWeightWarning)
        psi, values = _solve_linear_eif(
            lambda p: eif2_values(dataset, nuis, p))
    diagnostics = {"converged": True,
                   "n_treated_target": int(np.sum(dataset.a * dataset.s))}
    return _finish(dataset, psi, values, Method.NP_ATT_NSM, nuis,
                   bootstrap=bootstrap, refit=refit, seed=seed,
                   diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# parametric constructor
# ---------------------------------------------------------------------------

def _terms_with_s(basis: Sequence[Term]) -> tuple[Term, ...]:
    return tuple(basis) + tuple(t.with_special("s") for t in basis)


def _terms_with_z(basis: Sequence[Term]) -> tuple[Term, ...]:
    return tuple(basis) + tuple(t.with_special("z") for t in basis)


def fit_marginal_nuisance(dataset: Dataset, *,
                          c_basis: Optional[Sequence[Term]] = None,
                          t_basis: Optional[Sequence[Term]] = None,
                          pi_terms: Optional[Sequence[Term]] = None,
                          tau_terms: Optional[Sequence[Term]] = None,
                          alpha_terms: Optional[Sequence[Term]] = None,
                          rho_basis: Optional[Sequence[Term]] = None,
                          nsm: bool = False) -> MarginalNuisance:
    """Fit every marginal nuisance with parametric working models.

    Each component gets its own regression on the stratum that identifies
    it; the conditional effect (and, on request, the selection-bias
    function) is computed pointwise from the fitted components.
    """
    p = dataset.p
    base = tuple(c_basis) if c_basis else \
        (intercept(),) + tuple(term(c=(j,)) for j in range(p))
    tb = tuple(t_basis) if t_basis else base
    pit = tuple(pi_terms) if pi_terms else (term(special=("z",)),) + base
    taut = tuple(tau_terms) if tau_terms else base
    alphat = tuple(alpha_terms) if alpha_terms else base
    rhob = tuple(rho_basis) if rho_basis else base

    s1 = dataset.s == 1.0
    s0 = ~s1
    z0 = dataset.z == 0.0

    # instrument/population joint law
    tau_fit = fit_glm(dataset, s0, GLMSpec(Family.binomial_logit, taut),
                      response=dataset.z)
    alpha_fit = fit_glm(dataset, z0, GLMSpec(Family.binomial_logit, alphat),
                        response=dataset.s)
    e1 = tuple(t.with_special("z") for t in rhob)
    rho = estimate_rho(dataset, tau_fit, alpha_fit, e1)
    law = JointLawZS(tau_fit, alpha_fit, rho, rhob)

    # treatment propensity in the target population
    prop_fit = fit_glm(dataset, s1, GLMSpec(Family.binomial_logit, pit),
                       response=dataset.a)

    # trend at instrument one, from reference-population rows
    ref_terms = base + tuple(t.with_special("z") for t in tb)
    ref_fit = fit_glm(dataset, s0, GLMSpec(Family.linear_identity, ref_terms))
    nu_hat = ref_fit.coefficients[len(base):]

    # outcome at instrument zero, both populations
    yz0_terms = _terms_with_s(base)
    yz0_fit = fit_glm(dataset, z0, GLMSpec(Family.linear_identity, yz0_terms))

    # target-population outcome with instrument interactions (for beta_c)
    ys1_terms = _terms_with_z(base)
    ys1_fit = fit_glm(dataset, s1, GLMSpec(Family.linear_identity, ys1_terms))

    def frame(z=None, s=None, cmat=None):
        return CovariateFrame(cmat, z=z, s=s)

    def t1(cmat: CArray) -> np.ndarray:
        return build_design(CovariateFrame(cmat), tb) @ nu_hat

    def prop_a(z, cmat: CArray) -> np.ndarray:
        return prop_fit.predict(frame(z=z, s=1.0, cmat=cmat))

    def y_z0(s, cmat: CArray) -> np.ndarray:
        return yz0_fit.predict(frame(z=0.0, s=s, cmat=cmat))

    def y_s1(z, cmat: CArray) -> np.ndarray:
        return ys1_fit.predict(frame(z=z, s=1.0, cmat=cmat))

    def beta_fn(cmat: CArray) -> np.ndarray:
        dy = y_s1(1.0, cmat) - y_s1(0.0, cmat)
        da = prop_a(1.0, cmat) - prop_a(0.0, cmat)
        bad = np.abs(da) < RELEVANCE_FLOOR
        if bad.any():
            i = int(np.argmax(bad))
            raise RelevanceError(
                "instrument does not move the treatment probability at "
                f"covariate value {cmat[i].tolist()}")
        return (dy - t1(cmat)) / da

    gamma_fn = y_a0z0_fn = None
    if nsm:
        a0s1 = s1 & (dataset.a == 0.0)
        ya0_terms = _terms_with_z(base)
        ya0_fit = fit_glm(dataset, a0s1,
                          GLMSpec(Family.linear_identity, ya0_terms))

        def y_a0(z, cmat: CArray) -> np.ndarray:
            return ya0_fit.predict(frame(z=z, s=1.0, cmat=cmat))

        def gamma_fn(cmat: CArray) -> np.ndarray:
            dy0 = y_a0(1.0, cmat) - y_a0(0.0, cmat)
            da = prop_a(1.0, cmat) - prop_a(0.0, cmat)
            bad = np.abs(da) < RELEVANCE_FLOOR
            if bad.any():
                i = int(np.argmax(bad))
                raise RelevanceError(
                    "instrument does not move the treatment probability at "
                    f"covariate value {cmat[i].tolist()}")
            return -(dy0 - t1(cmat)) / da

        def y_a0z0_fn(cmat: CArray) -> np.ndarray:
            return y_a0(0.0, cmat)

    return MarginalNuisance(beta_c=beta_fn, t1=t1, y_z0=y_z0, prop_a=prop_a,
                            law_zs=law, s_margin=None, gamma_c=gamma_fn,
                            y_a0z0=y_a0z0_fn)
