"""Odds-ratio-parametrised joint laws and the index-function constructions.

Two binary joint laws drive everything downstream:

* ``JointLawZS`` — the law of (Z, S) given covariates, built from a model for
  Z in the reference population, a model for S at Z=0, and a log odds-ratio
  that ties them together.  Reference levels are z=0, s=0, so the two
  component models and the odds ratio pin down all four cells in closed form.
* ``JointLawAZ`` — the law of (A, Z) given covariates inside the target
  population, factored as propensity times the Z margin.

From these, `phi_binary` and `kappa_binary` build the signed inverse-weight
index functions whose conditional means vanish in both margins; they are the
raw material of the multiply robust estimating equations.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import CovariateFrame, Term, build_design
from .errors import (ConfigurationError, ConvergenceError, DegenerateLawError,
                     ExtremeWeightWarning)
from .fitting import FittedModel, expit, logit, solve_estimating_equations

WEIGHT_FLOOR = 1e-6


def _as_frame(view_or_c) -> object:
    """Accept a dataset-like view or a bare covariate matrix."""
    if hasattr(view_or_c, "c") and hasattr(view_or_c, "n"):
        return view_or_c
    return CovariateFrame(np.asarray(view_or_c, dtype=float))


def strip_specials(terms: Sequence[Term]) -> tuple[Term, ...]:
    """Drop the special factors from each term, keeping the covariate part.

    Used to derive a pure-covariate basis from an index-function term list
    (for example ``z, z:c1`` -> ``1, c1``).  The stripped terms must stay
    distinct, otherwise the implied basis would be rank deficient.
    """
    stripped = tuple(Term(t.covariate_indices) for t in terms)
    if len(set(stripped)) != len(stripped):
        raise ConfigurationError(
            "index terms collapse to a duplicate covariate basis after "
            "removing special factors")
    return stripped


def cells_zs(tau_p: np.ndarray, alpha_p: np.ndarray,
             log_or: np.ndarray) -> np.ndarray:
    """Four odds-ratio-factorised cells from raw component vectors.

    Columns are ordered (z,s) = 00, 10, 01, 11; rows are normalised to sum
    to one.  This is the single source of truth for the cell algebra — both
    the law objects and the raw-parameter estimating-equation stacks call it.
    """
    orr = np.exp(log_or)
    raw = np.column_stack([(1 - tau_p) * (1 - alpha_p), tau_p * (1 - alpha_p),
                           (1 - tau_p) * alpha_p, tau_p * alpha_p * orr])
    return raw / raw.sum(axis=1, keepdims=True)


def rho_score_rows(tau_p: np.ndarray, alpha_p: np.ndarray, log_or: np.ndarray,
                   e1_obs: np.ndarray, e1_z0: np.ndarray, e1_z1: np.ndarray,
                   z: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Per-row scores of the doubly robust odds-ratio estimating equation.

    The index is the observed e1 minus its variance-weighted projection onto
    functions of C (closed-form sum over z under the implied law), and the
    residual is S minus the implied f(S=1 | Z, C).
    """
    la = logit(np.clip(alpha_p, WEIGHT_FLOOR, 1 - WEIGHT_FLOOR))
    p0 = alpha_p
    p1 = expit(la + log_or)
    g0 = p0 * (1.0 - p0)
    g1 = p1 * (1.0 - p1)
    cells = cells_zs(tau_p, alpha_p, log_or)
    fz1 = cells[:, 1] + cells[:, 3]
    fz0 = 1.0 - fz1
    den = fz0 * g0 + fz1 * g1
    num = (fz0 * g0)[:, None] * e1_z0 + (fz1 * g1)[:, None] * e1_z1
    p_obs = np.where(z == 1.0, p1, p0)
    return (e1_obs - num / den[:, None]) * (s - p_obs)[:, None]


@dataclass(frozen=True)
class JointLawZS:
    """Joint law of (Z, S) given covariates under the odds-ratio factorisation.

    cell(z, s | c) is proportional to
    ``f(z | S=0, c) * f(s | Z=0, c) * exp(z * s * rho' basis(c))``
    normalised over the four cells.  ``tau`` models f(Z=1 | S=0, C) and
    ``alpha`` models f(S=1 | Z=0, C); both are logistic fits.
    """

    tau: FittedModel
    alpha: FittedModel
    rho: np.ndarray
    rho_terms: tuple[Term, ...]

    def __post_init__(self) -> None:
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        object.__setattr__(self, "rho", rho)
        terms = tuple(self.rho_terms)
        if any(t.special_factors for t in terms):
            raise ConfigurationError("odds-ratio basis terms must be pure "
                                     "covariate functions")
        if len(terms) != rho.shape[0]:
            raise ConfigurationError(
                f"rho has {rho.shape[0]} coefficients but {len(terms)} basis terms")
        object.__setattr__(self, "rho_terms", terms)

    # -- building blocks -------------------------------------------------

    def log_or(self, view_or_c) -> np.ndarray:
        frame = _as_frame(view_or_c)
        return build_design(frame, self.rho_terms) @ self.rho

    def cell_matrix(self, view_or_c) -> np.ndarray:
        """All four cells per row; columns ordered (z,s) = 00, 10, 01, 11."""
        frame = _as_frame(view_or_c)
        t = self.tau.predict(frame)
        a = self.alpha.predict(frame)
        lo = self.log_or(frame)
        if (np.any(t < WEIGHT_FLOOR) or np.any(t > 1 - WEIGHT_FLOOR)
                or np.any(a < WEIGHT_FLOOR) or np.any(a > 1 - WEIGHT_FLOOR)):
            raise DegenerateLawError(
                "component probability outside the clip bounds "
                f"[{WEIGHT_FLOOR}, {1 - WEIGHT_FLOOR}]")
        with np.errstate(over="ignore"):
            if not np.all(np.isfinite(np.exp(lo))):
                raise DegenerateLawError("odds ratio overflowed")
        return cells_zs(t, a, lo)

    def f_zs(self, z, s, view_or_c) -> np.ndarray:
        """f(z, s | c) at per-row (or scalar) z and s values."""
        frame = _as_frame(view_or_c)
        cells = self.cell_matrix(frame)
        z = np.broadcast_to(np.asarray(z, dtype=float), (frame.n,))
        s = np.broadcast_to(np.asarray(s, dtype=float), (frame.n,))
        idx = (z + 2 * s).astype(int)
        return cells[np.arange(frame.n), idx]

    # -- implied conditionals (closed forms under the factorisation) -----

    def s_given_z(self, view_or_c, z=None) -> np.ndarray:
        """f(S=1 | Z=z, c): shifts the alpha logit by z times the log OR."""
        frame = _as_frame(view_or_c)
        zv = frame.z if z is None else np.broadcast_to(np.asarray(z, float),
                                                       (frame.n,))
        eta = logit(np.clip(self.alpha.predict(frame), WEIGHT_FLOOR,
                            1 - WEIGHT_FLOOR))
        return expit(eta + zv * self.log_or(frame))

    def z_given_s(self, view_or_c, s=None) -> np.ndarray:
        """f(Z=1 | S=s, c): shifts the tau logit by s times the log OR."""
        frame = _as_frame(view_or_c)
        sv = frame.s if s is None else np.broadcast_to(np.asarray(s, float),
                                                       (frame.n,))
        eta = logit(np.clip(self.tau.predict(frame), WEIGHT_FLOOR,
                            1 - WEIGHT_FLOOR))
        return expit(eta + sv * self.log_or(frame))

    def z_marginal(self, view_or_c) -> np.ndarray:
        """f(Z=1 | c), mixing over both S strata."""
        cells = self.cell_matrix(view_or_c)
        return cells[:, 1] + cells[:, 3]

    def s_marginal(self, view_or_c) -> np.ndarray:
        """f(S=1 | c), mixing over both Z strata."""
        cells = self.cell_matrix(view_or_c)
        return cells[:, 2] + cells[:, 3]


@dataclass(frozen=True)
class JointLawAZ:
    """Joint law of (A, Z) given covariates within the target population.

    ``pi`` is the fitted propensity f(A=1 | Z, S=1, C); ``z_margin`` maps a
    covariate matrix to f(Z=1 | S=1, c), typically the implied conditional of
    a :class:`JointLawZS`.
    """

    pi: FittedModel
    z_margin: Callable[[np.ndarray], np.ndarray]

    @staticmethod
    def from_zs(pi: FittedModel, law_zs: JointLawZS) -> "JointLawAZ":
        return JointLawAZ(pi, lambda cmat: law_zs.z_given_s(
            CovariateFrame(cmat), s=1.0))

    def propensity(self, view_or_c, z=None) -> np.ndarray:
        frame = _as_frame(view_or_c)
        return self.pi.predict(frame, z=z, s=1.0)

    def cell_matrix(self, view_or_c) -> np.ndarray:
        """All four cells per row; columns ordered (a,z) = 00, 10, 01, 11."""
        frame = _as_frame(view_or_c)
        pz = np.asarray(self.z_margin(frame.c), dtype=float)
        p0 = self.propensity(frame, z=0.0)
        p1 = self.propensity(frame, z=1.0)
        cells = np.column_stack([(1 - p0) * (1 - pz), p0 * (1 - pz),
                                 (1 - p1) * pz, p1 * pz])
        if not np.all(np.isfinite(cells)):
            raise DegenerateLawError("non-finite treatment/instrument cells")
        return cells

    def f_az(self, a, z, view_or_c) -> np.ndarray:
        frame = _as_frame(view_or_c)
        cells = self.cell_matrix(frame)
        a = np.broadcast_to(np.asarray(a, dtype=float), (frame.n,))
        z = np.broadcast_to(np.asarray(z, dtype=float), (frame.n,))
        idx = (a + 2 * z).astype(int)
        return cells[np.arange(frame.n), idx]


# ---------------------------------------------------------------------------
# scalar cell / index-function evaluations
# ---------------------------------------------------------------------------

def joint_zs_cell(law: JointLawZS, z: int, s: int, c: Sequence[float]) -> float:
    """f(z, s | c) for one covariate vector."""
    if z not in (0, 1) or s not in (0, 1):
        raise ConfigurationError("z and s must be binary")
    cells = law.cell_matrix(np.asarray(c, dtype=float))
    return float(cells[0, int(z) + 2 * int(s)])


def _warn_extreme(count: int, what: str) -> None:
    if count:
        warnings.warn(f"{count} {what} cells below {WEIGHT_FLOOR}: inverse "
                      "weights are extreme", ExtremeWeightWarning, stacklevel=3)


def phi_binary(m_value: float, z: int, s: int, c: Sequence[float],
               law: JointLawZS) -> float:
    """m(c) * (-1)^(z+s) / f(z, s | c).

    By construction its conditional mean given either margin (and covariates)
    is zero, which is what makes it a valid index for the multiply robust
    equations.
    """
    f = joint_zs_cell(law, z, s, c)
    _warn_extreme(int(f < WEIGHT_FLOOR), "instrument/population")
    return float(m_value) * ((-1.0) ** (int(z) + int(s))) / f


def kappa_binary(h_value: float, a: int, z: int, c: Sequence[float],
                 law: JointLawAZ) -> float:
    """h(c) * (-1)^(a+z) / f(a, z | S=1, c)."""
    if a not in (0, 1) or z not in (0, 1):
        raise ConfigurationError("a and z must be binary")
    f = float(law.f_az(float(a), float(z), np.asarray(c, dtype=float))[0])
    _warn_extreme(int(f < WEIGHT_FLOOR), "treatment/instrument")
    return float(h_value) * ((-1.0) ** (int(a) + int(z))) / f


def signed_zs_weight(law: JointLawZS, view) -> np.ndarray:
    """(-1)^(z+s) / f(z, s | c) at the observed rows (vectorised phi core)."""
    f = law.f_zs(view.z, view.s, view)
    _warn_extreme(int(np.sum(f < WEIGHT_FLOOR)), "instrument/population")
    return ((-1.0) ** (view.z + view.s)) / f


def signed_az_weight(law: JointLawAZ, view) -> np.ndarray:
    """(-1)^(a+z) / f(a, z | S=1, c) at the observed rows (vectorised kappa core)."""
    f = law.f_az(view.a, view.z, view)
    _warn_extreme(int(np.sum(f < WEIGHT_FLOOR)), "treatment/instrument")
    return ((-1.0) ** (view.a + view.z)) / f


# ---------------------------------------------------------------------------
# odds-ratio estimation
# ---------------------------------------------------------------------------

def estimate_rho(dataset, tau: FittedModel, alpha: FittedModel,
                 e1_terms: Sequence[Term]) -> np.ndarray:
    """Estimate the log odds-ratio coefficients.

    Solves the mean-zero system whose i-th row is

        [e1(Z_i, C_i) - P(C_i; rho)] * {S_i - f(S=1 | Z_i, C_i; alpha, rho)}

    where P(c; rho) is the ratio of the conditional means (over Z given C,
    under the implied joint law) of e1 * f(S=1|Z,c) * f(S=0|Z,c) and of
    f(S=1|Z,c) * f(S=0|Z,c).  The subtraction makes the equation insensitive
    to getting either component model wrong, at the usual rate.

    The odds-ratio basis is the covariate part of ``e1_terms`` (special
    factors stripped), so the system is square.
    """
    e1_terms = tuple(e1_terms)
    rho_terms = strip_specials(e1_terms)
    n_ref = int(np.sum(dataset.s == 0))
    if n_ref == 0 or n_ref == dataset.n:
        raise ConfigurationError("both population strata are required to "
                                 "estimate the odds ratio")

    from .fitting import _ColumnOverride
    e1_obs = build_design(dataset, e1_terms)
    e1_z0 = build_design(_ColumnOverride(dataset, z=0.0), e1_terms)
    e1_z1 = build_design(_ColumnOverride(dataset, z=1.0), e1_terms)
    if np.array_equal(e1_z0, e1_z1):
        raise ConfigurationError(
            "the odds-ratio index does not depend on the instrument; its "
            "projection onto covariate functions annihilates it and the "
            "equations are degenerate (give every index term a z factor)")
    B_rho = build_design(dataset, rho_terms)
    tau_p = np.clip(tau.predict(dataset), WEIGHT_FLOOR, 1 - WEIGHT_FLOOR)
    alpha_p = np.clip(alpha.predict(dataset), WEIGHT_FLOOR, 1 - WEIGHT_FLOOR)

    def resid(rho_vec: np.ndarray) -> np.ndarray:
        rows = rho_score_rows(tau_p, alpha_p, B_rho @ rho_vec,
                              e1_obs, e1_z0, e1_z1, dataset.z, dataset.s)
        return rows.mean(axis=0)

    result = solve_estimating_equations(resid, np.zeros(len(e1_terms)))
    if not result.converged:
        raise ConvergenceError(
            f"odds-ratio equations not solved (residual {result.residual_norm:.2e})",
            stage="odds_ratio")
    return result.params


# ---------------------------------------------------------------------------
# alternating projection onto doubly mean-zero vectors
# ---------------------------------------------------------------------------

@dataclass
class AceResult:
    values: np.ndarray
    achieved_tol: float
    converged: bool
    iterations: int


def _group_demean(values: np.ndarray, inverse: np.ndarray,
                  counts: np.ndarray) -> np.ndarray:
    means = np.bincount(inverse, weights=values) / counts
    return values - means[inverse]


def _max_group_mean(values: np.ndarray, inverse: np.ndarray,
                    counts: np.ndarray) -> float:
    means = np.bincount(inverse, weights=values) / counts
    return float(np.max(np.abs(means))) if means.size else 0.0


def ace_project(values: np.ndarray, group_key_1, group_key_2,
                tol: float = 1e-10, max_iter: int = 500) -> AceResult:
    """Alternately remove within-group means until both groupings are centred.

    ``group_key_1`` / ``group_key_2`` are either sequences of hashable keys
    (one per entry of ``values``) or callables applied to the entry index.
    The limit has empirical conditional mean zero under both groupings; with
    discrete keys the iteration converges geometrically.
    """
    v = np.asarray(values, dtype=float).copy()
    if not np.all(np.isfinite(v)):
        raise ConfigurationError("non-finite values")
    n = v.shape[0]

    def to_inverse(keys):
        if callable(keys):
            keys = [keys(i) for i in range(n)]
        keys = list(keys)
        if len(keys) != n:
            raise ConfigurationError("group keys must match values length")
        _, inverse = np.unique(np.asarray(keys, dtype=object), return_inverse=True)
        return inverse, np.bincount(inverse).astype(float)

    inv1, cnt1 = to_inverse(group_key_1)
    inv2, cnt2 = to_inverse(group_key_2)

    achieved = max(_max_group_mean(v, inv1, cnt1), _max_group_mean(v, inv2, cnt2))
    for it in range(1, max_iter + 1):
        if achieved <= tol:
            return AceResult(v, achieved, True, it - 1)
        v = _group_demean(v, inv1, cnt1)
        v = _group_demean(v, inv2, cnt2)
        achieved = max(_max_group_mean(v, inv1, cnt1),
                       _max_group_mean(v, inv2, cnt2))
    return AceResult(v, achieved, achieved <= tol, max_iter)
