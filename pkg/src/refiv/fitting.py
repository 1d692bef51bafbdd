"""Numerical backbone: GLM fitting, root finding, sandwich variance, bootstrap.

Everything here is deliberately small and explicit.  The package's estimators
are stacked M-estimators; their standard errors come from
:func:`sandwich_variance` applied to the full stacked score, so the behaviour
of these primitives (tolerances, clipping, seeding) is part of the public
contract rather than an implementation detail.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset, GLMSpec, Family, build_design, design_row
from .errors import (BootstrapInstabilityError, ConfigurationError,
                     ConvergenceError, RefivError, SeparationError,
                     SingularDesignError)

PROB_CLIP = 1e-6
GLM_GRADIENT_TOL = 1e-8
GLM_MAX_ITER = 100
ROOT_TOL = 1e-9


def expit(x: np.ndarray) -> np.ndarray:
    """Numerically stable inverse logit."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


class _ColumnOverride:
    """Dataset view with one or more special columns replaced.

    Lets a fitted model be evaluated at counterfactual levels of a, z, or s
    (for example f(A=1 | Z=z, S=1, C) at both z=0 and z=1 for every row).
    """

    __slots__ = ("_base", "a", "z", "s")

    def __init__(self, base, *, a=None, z=None, s=None) -> None:
        self._base = base
        n = base.n
        self.a = base.a if a is None else np.broadcast_to(np.asarray(a, float), (n,))
        self.z = base.z if z is None else np.broadcast_to(np.asarray(z, float), (n,))
        base_s = getattr(base, "s", np.zeros(n))
        self.s = base_s if s is None else np.broadcast_to(np.asarray(s, float), (n,))

    @property
    def n(self) -> int:
        return self._base.n

    @property
    def p(self) -> int:
        return self._base.p

    @property
    def c(self) -> np.ndarray:
        return self._base.c


@dataclass
class FittedModel:
    """A fitted linear or logistic working model."""

    spec: GLMSpec
    coefficients: np.ndarray
    converged: bool
    iterations: int

    def linear_predictor(self, dataset, *, a=None, z=None, s=None) -> np.ndarray:
        view = dataset
        if a is not None or z is not None or s is not None:
            view = _ColumnOverride(dataset, a=a, z=z, s=s)
        return build_design(view, self.spec.terms) @ self.coefficients

    def predict(self, dataset, *, a=None, z=None, s=None) -> np.ndarray:
        """Mean prediction: identity link for linear, inverse logit for logistic."""
        eta = self.linear_predictor(dataset, a=a, z=z, s=s)
        if self.spec.family is Family.binomial_logit:
            return expit(eta)
        return eta

    def predict_at(self, c: Sequence[float], *, a: float = 0.0, z: float = 0.0,
                   s: float = 0.0) -> float:
        eta = float(design_row(c, self.spec.terms, a=a, z=z, s=s)
                    @ self.coefficients)
        if self.spec.family is Family.binomial_logit:
            return float(expit(np.array([eta]))[0])
        return eta


@dataclass
class RootResult:
    params: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int


@dataclass
class VarianceReport:
    covariance: np.ndarray
    se: np.ndarray
    method: str
    failed_replicates: int = 0


# ---------------------------------------------------------------------------
# GLM fitting
# ---------------------------------------------------------------------------

def fit_glm(dataset: Dataset, subset_mask: Optional[np.ndarray], spec: GLMSpec,
            weights: Optional[np.ndarray] = None,
            response: Optional[np.ndarray] = None) -> FittedModel:
    """Fit one working model on a subset of rows.

    Parameters
    ----------
    dataset :
        The full sample.
    subset_mask :
        Boolean vector selecting the fitting subset (None = all rows).
    spec :
        Family and term list.
    weights :
        Optional per-row weights aligned with the *full* dataset.
    response :
        Response vector aligned with the full dataset; defaults to the
        outcome column.  Nuisance models regress A, Z, or S instead of Y.

    Returns
    -------
    FittedModel
        Exact weighted least squares for ``linear_identity``; IRLS to
        gradient max-norm <= 1e-8 for ``binomial_logit``.

    Raises
    ------
    SingularDesignError
        If the subset design is rank deficient.
    SeparationError
        If the logistic likelihood is degenerate (probabilities pinned at the
        clip bounds with a non-vanishing gradient).
    """
    if subset_mask is None:
        subset_mask = np.ones(dataset.n, dtype=bool)
    subset_mask = np.asarray(subset_mask, dtype=bool)
    if subset_mask.shape != (dataset.n,):
        raise ConfigurationError("subset_mask must have one entry per row")
    if not subset_mask.any():
        raise ConfigurationError("empty fitting subset")
    X = build_design(dataset, spec.terms)[subset_mask]
    full_y = dataset.y if response is None else np.asarray(response, dtype=float)
    if full_y.shape != (dataset.n,):
        raise ConfigurationError("response must have one entry per row")
    y = full_y[subset_mask]
    w = np.ones(X.shape[0]) if weights is None else \
        np.asarray(weights, dtype=float)[subset_mask]
    if np.any(w < 0):
        raise ConfigurationError("negative weights")

    if spec.family is Family.linear_identity:
        sw = np.sqrt(w)
        coef, _, rank, _ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
        if rank < X.shape[1]:
            raise SingularDesignError(
                f"design for {spec.family.value} model is rank deficient "
                f"(rank {rank} < {X.shape[1]} columns)")
        return FittedModel(spec, coef, True, 0)

    # --- logistic IRLS ---
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesignError(
            f"design for logistic model is rank deficient ({X.shape[1]} columns)")
    k = X.shape[1]
    beta = np.zeros(k)
    for it in range(GLM_MAX_ITER + 1):
        eta = X @ beta
        prob = np.clip(expit(eta), PROB_CLIP, 1.0 - PROB_CLIP)
        grad = X.T @ (w * (y - prob))
        if np.max(np.abs(grad)) <= GLM_GRADIENT_TOL:
            return FittedModel(spec, beta, True, it)
        if it == GLM_MAX_ITER:
            break
        irls_w = w * prob * (1.0 - prob)
        try:
            step = np.linalg.solve(X.T @ (X * irls_w[:, None]), grad)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError(f"IRLS normal equations singular: {exc}") from None
        beta = beta + step
    # diagnose: pinned probabilities with non-vanishing gradient = separation
    prob = expit(X @ beta)
    pinned = (prob <= PROB_CLIP) | (prob >= 1.0 - PROB_CLIP)
    if pinned.any():
        raise SeparationError(
            f"logistic fit did not converge and {int(pinned.sum())} fitted "
            "probabilities are pinned at the clip bounds: separation")
    raise ConvergenceError(
        f"logistic fit: gradient norm {np.max(np.abs(grad)):.3e} > "
        f"{GLM_GRADIENT_TOL} after {GLM_MAX_ITER} iterations")


# ---------------------------------------------------------------------------
# estimating-equation solver
# ---------------------------------------------------------------------------

def _fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                 fx: np.ndarray) -> np.ndarray:
    """Forward-difference Jacobian, step h_j = 1e-6 * max(1, |x_j|)."""
    k = x.shape[0]
    J = np.empty((fx.shape[0], k))
    for j in range(k):
        h = 1e-6 * max(1.0, abs(float(x[j])))
        xj = x.copy()
        xj[j] += h
        J[:, j] = (fn(xj) - fx) / h
    return J


def solve_estimating_equations(residual_mean_fn: Callable[[np.ndarray], np.ndarray],
                               init: np.ndarray, tol: float = ROOT_TOL,
                               max_iter: int = 50, *,
                               linear: bool = False) -> RootResult:
    """Damped Newton root finder for mean estimating equations.

    Parameters
    ----------
    residual_mean_fn :
        Maps a parameter vector to the vector of mean residuals (same length).
    init :
        Starting values.
    tol :
        Convergence threshold on the max-norm of the mean residuals.
    max_iter :
        Iteration budget; exceeding it returns ``converged=False`` (never
        silently).
    linear :
        Declare the system linear in the parameters: one Newton step with the
        forward-difference Jacobian (exact for an affine map up to roundoff)
        followed by a few refinement steps reusing the same factorisation, to
        polish away the difference-quotient roundoff.

    Raises
    ------
    SingularDesignError
        If the Jacobian is singular.
    """
    x = np.asarray(init, dtype=float).copy()
    r = np.asarray(residual_mean_fn(x), dtype=float)
    if r.shape != x.shape:
        raise ConfigurationError(
            f"residual dimension {r.shape} != parameter dimension {x.shape}")

    if linear:
        J = _fd_jacobian(residual_mean_fn, x, r)
        norm = float(np.max(np.abs(r)))
        steps = 0
        for _ in range(4):
            if norm == 0.0:
                break
            try:
                step = np.linalg.solve(J, r)
            except np.linalg.LinAlgError as exc:
                raise SingularDesignError(
                    f"singular linear system: {exc}") from None
            cand = x - step
            rc = np.asarray(residual_mean_fn(cand), dtype=float)
            new_norm = float(np.max(np.abs(rc)))
            steps += 1
            if new_norm >= norm and steps > 1:
                break     # refinement stalled; roundoff floor reached
            x, r, norm = cand, rc, new_norm
        return RootResult(x, norm, norm <= tol, steps)

    norm = float(np.max(np.abs(r)))
    for it in range(max_iter):
        if norm <= tol:
            return RootResult(x, norm, True, it)
        J = _fd_jacobian(residual_mean_fn, x, r)
        try:
            delta = np.linalg.solve(J, r)
        except np.linalg.LinAlgError as exc:
            raise SingularDesignError(f"singular Jacobian: {exc}") from None
        # halving line search on the residual 2-norm
        base = float(np.linalg.norm(r))
        step = 1.0
        while step > 2.0 ** -30:
            cand = x - step * delta
            rc = np.asarray(residual_mean_fn(cand), dtype=float)
            if np.linalg.norm(rc) < base:
                x, r = cand, rc
                break
            step /= 2.0
        else:
            # no improving step exists: report where we are
            return RootResult(x, norm, False, it + 1)
        norm = float(np.max(np.abs(r)))
    return RootResult(x, norm, norm <= tol, max_iter)


# ---------------------------------------------------------------------------
# variance estimation
# ---------------------------------------------------------------------------

def sandwich_variance(score_rows: np.ndarray, jacobian: np.ndarray) -> VarianceReport:
    """Stacked-sandwich covariance J^{-1} (sum_i U_i U_i^T / n) J^{-T} / n.

    ``score_rows`` holds one stacked score per observation (n x k); the
    Jacobian is the mean derivative of the stacked estimating system, so
    nuisance uncertainty propagates into the parameters of interest when the
    nuisance equations are stacked alongside.
    """
    U = np.asarray(score_rows, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    J = np.atleast_2d(np.asarray(jacobian, dtype=float))
    n, k = U.shape
    if J.shape != (k, k):
        raise ConfigurationError(f"jacobian shape {J.shape} does not match "
                                 f"score dimension {k}")
    meat = U.T @ U / n
    try:
        Jinv = np.linalg.solve(J, np.eye(k))
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError(f"singular jacobian: {exc}") from None
    cov = Jinv @ meat @ Jinv.T / n
    cov = (cov + cov.T) / 2.0
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return VarianceReport(cov, se, "sandwich_stacked")


def bootstrap_se(estimator_fn: Callable[[Dataset], np.ndarray], dataset: Dataset,
                 B: int, seed: int) -> VarianceReport:
    """Nonparametric bootstrap with deterministic per-replicate seeding.

    Replicate b resamples n rows with replacement using the stream seeded by
    ``seed XOR b``; replicates that raise or return non-finite values are
    dropped and counted.  More than 20% failures aborts.
    """
    if B < 2:
        raise ConfigurationError("bootstrap needs B >= 2")
    n = dataset.n
    estimates = []
    failures = 0
    for b in range(B):
        rng = np.random.default_rng(seed ^ b)
        idx = rng.integers(0, n, size=n)
        try:
            est = np.atleast_1d(np.asarray(estimator_fn(dataset.take(idx)),
                                           dtype=float))
            if not np.all(np.isfinite(est)):
                raise ConvergenceError("non-finite bootstrap estimate")
        except (RefivError, np.linalg.LinAlgError):
            failures += 1
            continue
        estimates.append(est)
    if failures > 0.2 * B:
        raise BootstrapInstabilityError(
            f"{failures}/{B} bootstrap replicates failed")
    mat = np.vstack(estimates)
    centred = mat - mat.mean(axis=0)
    cov = centred.T @ centred / (mat.shape[0] - 1)
    cov = np.atleast_2d(cov)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return VarianceReport(cov, se, "bootstrap", failed_replicates=failures)
