"""Estimator-layer tests.

The first block checks the conditional-effect score by exact enumeration on
a designed discrete law: the score stays mean zero at the true effect when
any one model group is correct and every other group is deliberately wrong.
The rest covers the residual algebra, the staged nuisance pipeline, the
variance-optimal index, the comparator estimators, the confounded
benchmark, and the panel (two-period) estimators.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from refiv.data import (Dataset, Family, GLMSpec, Observation, PanelDataset,
                        intercept, term)
from refiv.errors import (ConfigurationError, RelevanceError, SeparationError)
from refiv.estimators import (ModelConfig, NuisanceSet, StructuralSpec,
                              benchmark_dr_gest, effect_score,
                              efficient_h_m_nsm, efficient_m_nem,
                              estimate_did_nem, estimate_did_nsm,
                              estimate_g_s, estimate_g_z, estimate_ipw,
                              estimate_mr_eff_nem, estimate_mr_nem,
                              estimate_mr_nsm, estimate_tsls,
                              fit_nuisance_pipeline, residual_epsilon,
                              residual_epsilon_star)
from refiv.fitting import FittedModel, logit
from refiv.jointlaw import JointLawAZ, JointLawZS
from refiv.simlab import Setting, generate_dataset, scenario_specs

# ---------------------------------------------------------------------------
# a designed discrete law (binary covariate, all cells exact rationals)
# ---------------------------------------------------------------------------

F_C1 = 2.0 / 5.0
F_ZS = {  # f(z, s | c), keyed (c, z, s); each c-slice sums to one
    (0, 0, 0): 6 / 20, (0, 1, 0): 4 / 20, (0, 0, 1): 5 / 20, (0, 1, 1): 5 / 20,
    (1, 0, 0): 4 / 20, (1, 1, 0): 6 / 20, (1, 0, 1): 3 / 20, (1, 1, 1): 7 / 20,
}
PI_ENUM = {(0, 0): 7 / 20, (1, 0): 12 / 20, (0, 1): 9 / 20, (1, 1): 13 / 20}
PSI_TRUE = 0.7
T1 = {0: 0.5, 1: -0.25}       # instrument shift of the outcome; zero at z=0
B0 = {0: 0.5, 1: -0.4}        # reference-population outcome level
B1 = {0: 0.75, 1: 0.25}       # target-population shift

TAU = {0: 0.4, 1: 0.6}        # instrument frequency in the reference stratum
ALPHA = {0: 5 / 11, 1: 3 / 7}  # target frequency at instrument zero
LOG_OR = {0: math.log(1.5), 1: math.log(14 / 9)}

C_BASIS = (intercept(), term(c=(0,)))
ENUM_CONFIG = ModelConfig(tau_terms=C_BASIS, alpha_terms=C_BASIS,
                          rho_basis=C_BASIS, t_basis=C_BASIS,
                          b0_basis=C_BASIS, b1_basis=C_BASIS,
                          beta_terms=(term(special=("a",)),))
ENUM_SPEC = StructuralSpec(ENUM_CONFIG.beta_terms)


def outcome_mean(a, z, s, c):
    return B0[c] + s * B1[c] + T1[c] * z + PSI_TRUE * a * s


def enumerate_support():
    """All twelve support points with their exact probabilities."""
    rows, weights = [], []
    for c in (0, 1):
        fc = F_C1 if c == 1 else 1.0 - F_C1
        for z in (0, 1):
            for s in (0, 1):
                fzs = F_ZS[(c, z, s)]
                for a in ((0, 1) if s == 1 else (0,)):
                    if s == 1:
                        fa = PI_ENUM[(z, c)] if a == 1 else 1.0 - PI_ENUM[(z, c)]
                    else:
                        fa = 1.0
                    rows.append((outcome_mean(a, z, s, c), a, z, s, c))
                    weights.append(fc * fzs * fa)
    y, a, z, s, c = (np.array(cols, dtype=float) for cols in zip(*rows))
    return Dataset(y=y, a=a, z=z, s=s, c=c.reshape(-1, 1)), np.array(weights)


def two_point_logit(v0, v1):
    return np.array([logit(v0), logit(v1) - logit(v0)])


def two_point(v0, v1):
    return np.array([v0, v1 - v0])


TAU_TRUE = two_point_logit(TAU[0], TAU[1])
ALPHA_TRUE = two_point_logit(ALPHA[0], ALPHA[1])
RHO_TRUE = two_point(LOG_OR[0], LOG_OR[1])
NU_TRUE = two_point(T1[0], T1[1])
TH0_TRUE = two_point(B0[0], B0[1])
TH1_TRUE = two_point(B1[0], B1[1])

# deliberate, sizeable corruptions of each coefficient vector
TAU_WRONG = TAU_TRUE + np.array([0.30, -0.40])
ALPHA_WRONG = ALPHA_TRUE + np.array([-0.25, 0.50])
RHO_WRONG = RHO_TRUE + np.array([0.20, 0.30])
NU_WRONG = NU_TRUE + np.array([0.15, -0.20])
TH0_WRONG = TH0_TRUE + np.array([0.40, 0.25])
TH1_WRONG = TH1_TRUE + np.array([-0.30, 0.20])


def make_nuisance(tau_v, alpha_v, rho_v, nu_v, th0_v, th1_v,
                  config=ENUM_CONFIG):
    logit_spec = GLMSpec(Family.binomial_logit, C_BASIS)
    return NuisanceSet(
        config=config,
        tau=FittedModel(logit_spec, tau_v, True, 0),
        alpha=FittedModel(logit_spec, alpha_v, True, 0),
        rho=rho_v, nu=nu_v, theta0=th0_v, theta1=th1_v,
        nu_tilde=nu_v, psi_tilde=np.array([PSI_TRUE]),
    )


# Which models are CORRECT in each pattern; everything else is corrupted.
ROBUSTNESS_PATTERNS = {
    "trend-and-levels": make_nuisance(TAU_WRONG, ALPHA_WRONG, RHO_WRONG,
                                      NU_TRUE, TH0_TRUE, TH1_TRUE),
    "instrument-frequency-and-ratio": make_nuisance(
        TAU_TRUE, ALPHA_WRONG, RHO_TRUE, NU_TRUE, TH0_WRONG, TH1_WRONG),
    "target-frequency-and-ratio": make_nuisance(
        TAU_WRONG, ALPHA_TRUE, RHO_TRUE, NU_WRONG, TH0_WRONG, TH1_TRUE),
    "whole-joint-law": make_nuisance(TAU_TRUE, ALPHA_TRUE, RHO_TRUE,
                                     NU_WRONG, TH0_WRONG, TH1_WRONG),
}

INDEXES = {
    "default": None,
    "tilted": lambda c: np.array([1.0 + 0.6 * c[0]]),
}


class TestEffectScoreSingleGroupRobustness:

    def test_support_probabilities_sum_to_one(self):
        _, w = enumerate_support()
        assert abs(math.fsum(w) - 1.0) < 1e-15

    @pytest.mark.parametrize("pattern", sorted(ROBUSTNESS_PATTERNS))
    @pytest.mark.parametrize("index", sorted(INDEXES))
    def test_score_mean_zero_when_one_group_is_correct(self, pattern, index):
        ds, w = enumerate_support()
        vals = effect_score(ds, ROBUSTNESS_PATTERNS[pattern], ENUM_SPEC,
                            np.array([PSI_TRUE]), mode="nem",
                            m_fn=INDEXES[index])
        assert abs(math.fsum(w * vals[:, 0])) <= 1e-12

    @pytest.mark.parametrize("index", sorted(INDEXES))
    def test_score_mean_nonzero_when_everything_is_wrong(self, index):
        ds, w = enumerate_support()
        nuis = make_nuisance(TAU_WRONG, ALPHA_WRONG, RHO_WRONG,
                             NU_WRONG, TH0_WRONG, TH1_WRONG)
        vals = effect_score(ds, nuis, ENUM_SPEC, np.array([PSI_TRUE]),
                            mode="nem", m_fn=INDEXES[index])
        assert abs(math.fsum(w * vals[:, 0])) > 1e-6

    def test_score_mean_nonzero_away_from_the_true_effect(self):
        ds, w = enumerate_support()
        nuis = ROBUSTNESS_PATTERNS["whole-joint-law"]
        vals = effect_score(ds, nuis, ENUM_SPEC, np.array([PSI_TRUE + 0.5]),
                            mode="nem")
        assert abs(math.fsum(w * vals[:, 0])) > 1e-3


# ---------------------------------------------------------------------------
# residual algebra
# ---------------------------------------------------------------------------

MINI_BASIS = (intercept(),)
MINI_CONFIG = ModelConfig(tau_terms=MINI_BASIS, alpha_terms=MINI_BASIS,
                          rho_basis=MINI_BASIS, t_basis=MINI_BASIS,
                          b0_basis=MINI_BASIS, b1_basis=MINI_BASIS,
                          beta_terms=(term(special=("a",)),),
                          q_basis=MINI_BASIS, pi_terms=MINI_BASIS)
MINI_SPEC = StructuralSpec(MINI_CONFIG.beta_terms)


def mini_nuisance(nu, theta0, theta1, *, pi_prob=None, omega=None):
    logit_spec = GLMSpec(Family.binomial_logit, MINI_BASIS)
    pi = None
    if pi_prob is not None:
        pi = FittedModel(GLMSpec(Family.binomial_logit, MINI_BASIS),
                         np.array([logit(pi_prob)]), True, 0)
    return NuisanceSet(
        config=MINI_CONFIG,
        tau=FittedModel(logit_spec, np.array([0.0]), True, 0),
        alpha=FittedModel(logit_spec, np.array([0.0]), True, 0),
        rho=np.array([0.0]), nu=np.array([nu], dtype=float),
        theta0=np.array([theta0], dtype=float),
        theta1=np.array([theta1], dtype=float),
        nu_tilde=np.array([nu], dtype=float), psi_tilde=np.array([0.0]),
        pi=pi,
        omega=None if omega is None else np.array([omega], dtype=float),
    )


class TestResidualAlgebra:

    def test_zero_coefficients_leave_the_outcome_untouched(self):
        obs = Observation(y=2.3, a=1, z=1, s=1, c=(0.0,))
        nuis = mini_nuisance(0.0, 0.0, 0.0)
        got = residual_epsilon_star(obs, np.array([0.0]), nuis, MINI_SPEC)
        assert got == pytest.approx(2.3, abs=1e-15)

    def test_every_component_cancels_at_a_constructed_point(self):
        # y = effect + instrument shift + reference level + target shift
        obs = Observation(y=3.0, a=1, z=1, s=1, c=(0.0,))
        nuis = mini_nuisance(nu=0.5, theta0=1.0, theta1=0.5)
        got = residual_epsilon_star(obs, np.array([1.0]), nuis, MINI_SPEC)
        assert got == pytest.approx(0.0, abs=1e-15)

    def test_reference_rows_ignore_effect_and_target_shift(self):
        obs = Observation(y=1.7, a=0, z=1, s=0, c=(0.0,))
        base = mini_nuisance(nu=0.5, theta0=1.0, theta1=0.5)
        got = residual_epsilon_star(obs, np.array([1.0]), base, MINI_SPEC)
        assert got == pytest.approx(0.2, abs=1e-15)
        shifted = mini_nuisance(nu=0.5, theta0=1.0, theta1=9.0)
        again = residual_epsilon_star(obs, np.array([5.0]), shifted, MINI_SPEC)
        assert again == pytest.approx(got, abs=1e-15)

    def test_selection_bias_correction_is_subtracted_on_target_rows(self):
        obs = Observation(y=3.0, a=1, z=1, s=1, c=(0.0,))
        nuis = mini_nuisance(nu=0.5, theta0=1.0, theta1=0.5,
                             pi_prob=0.25, omega=2.0)
        # the starred residual is zero here, so only the correction remains:
        # q(c) * (a - propensity) = 2 * (1 - 0.25) = 1.5
        got = residual_epsilon(obs, np.array([1.0]), nuis, MINI_SPEC)
        assert got == pytest.approx(-1.5, abs=1e-15)

    def test_zero_selection_bias_reduces_to_the_starred_residual(self):
        obs = Observation(y=2.1, a=1, z=0, s=1, c=(0.0,))
        with_corr = mini_nuisance(nu=0.5, theta0=1.0, theta1=0.5,
                                  pi_prob=0.25, omega=0.0)
        plain = mini_nuisance(nu=0.5, theta0=1.0, theta1=0.5)
        assert residual_epsilon(obs, np.array([1.0]), with_corr, MINI_SPEC) \
            == pytest.approx(residual_epsilon_star(obs, np.array([1.0]),
                                                   plain, MINI_SPEC), abs=1e-15)

    def test_reference_rows_get_no_selection_correction(self):
        obs = Observation(y=1.7, a=0, z=1, s=0, c=(0.0,))
        nuis = mini_nuisance(nu=0.5, theta0=1.0, theta1=0.5,
                             pi_prob=0.25, omega=2.0)
        got = residual_epsilon(obs, np.array([1.0]), nuis, MINI_SPEC)
        assert got == pytest.approx(0.2, abs=1e-15)

    def test_missing_propensity_or_coefficients_rejected(self):
        obs = Observation(y=1.0, a=1, z=1, s=1, c=(0.0,))
        nuis = mini_nuisance(0.5, 1.0, 0.5)  # no pi, no omega
        with pytest.raises(ConfigurationError):
            residual_epsilon(obs, np.array([1.0]), nuis, MINI_SPEC)

    def test_instrument_index_terms_swap_treatment_for_instrument(self):
        assert MINI_SPEC.instrument_index_terms == (term(special=("z",)),)


# ---------------------------------------------------------------------------
# sampled data from the designed law (stronger instrument for estimation)
# ---------------------------------------------------------------------------

PI_STRONG = {(0, 0): 5 / 20, (1, 0): 14 / 20, (0, 1): 6 / 20, (1, 1): 15 / 20}
SAMPLE_CONFIG = ENUM_CONFIG
SAMPLE_CONFIG_NSM = dataclasses.replace(
    ENUM_CONFIG, q_basis=C_BASIS,
    pi_terms=(intercept(), term(special=("z",)), term(c=(0,))))


def draw_sample(n, rng):
    c = (rng.random(n) < F_C1).astype(float)
    z = np.empty(n)
    s = np.empty(n)
    for i in range(n):
        ci = int(c[i])
        probs = [F_ZS[(ci, zz, ss)] for zz in (0, 1) for ss in (0, 1)]
        k = rng.choice(4, p=probs)
        z[i], s[i] = divmod(k, 2)
    pvec = np.array([PI_STRONG[(int(zz), int(cc))] for zz, cc in zip(z, c)])
    a = np.where(s == 1, (rng.random(n) < pvec), 0.0).astype(float)
    y = (0.5 - 0.9 * c + s * (0.75 - 0.5 * c) + (0.5 - 0.75 * c) * z
         + PSI_TRUE * a * s + rng.normal(0, 1, n))
    return Dataset(y=y, a=a, z=z, s=s, c=c.reshape(-1, 1))


@pytest.fixture(scope="module")
def sampled():
    return draw_sample(6000, np.random.default_rng(77))


@pytest.fixture(scope="module")
def fitted(sampled):
    return fit_nuisance_pipeline(sampled, SAMPLE_CONFIG, "nem")


@pytest.fixture(scope="module")
def fitted_nsm(sampled):
    return fit_nuisance_pipeline(sampled, SAMPLE_CONFIG_NSM, "nsm")


@pytest.fixture(scope="module")
def wide():
    """A large draw from the simulation-lab generator, all models correct."""
    ds = generate_dataset(20000, seed=31)
    cfg = scenario_specs(Setting.ALL_CORRECT)
    return ds, cfg, fit_nuisance_pipeline(ds, cfg, "nem")


class TestNuisancePipeline:

    def test_saturated_trend_matches_the_empirical_contrast(self, sampled,
                                                            fitted):
        # with one binary covariate the trend basis is saturated, so the
        # fitted instrument shift must equal the raw cell contrast exactly
        for cv in (0.0, 1.0):
            ref = (sampled.s == 0) & (sampled.c[:, 0] == cv)
            emp = (sampled.y[ref & (sampled.z == 1)].mean()
                   - sampled.y[ref & (sampled.z == 0)].mean())
            fit = fitted.nu[0] + fitted.nu[1] * cv
            assert fit == pytest.approx(emp, abs=1e-10)

    def test_preliminary_effect_lands_near_the_truth(self, fitted):
        assert abs(fitted.psi_tilde[0] - PSI_TRUE) < 0.5

    def test_selection_route_also_fits_propensity_and_bias(self, fitted_nsm):
        assert fitted_nsm.pi is not None
        assert fitted_nsm.omega is not None
        assert fitted_nsm.omega.shape == (2,)

    def test_single_stratum_rejected(self):
        rng = np.random.default_rng(5)
        n = 200
        ds = Dataset(y=rng.normal(size=n),
                     a=rng.integers(0, 2, n).astype(float),
                     z=rng.integers(0, 2, n).astype(float),
                     s=np.ones(n), c=rng.normal(size=(n, 1)))
        with pytest.raises(ConfigurationError,
                           match="both population strata"):
            fit_nuisance_pipeline(ds, SAMPLE_CONFIG, "nem")

    def test_selection_route_requires_the_extra_models(self, sampled):
        with pytest.raises(ConfigurationError, match="q_basis and pi_terms"):
            fit_nuisance_pipeline(sampled, SAMPLE_CONFIG, "nsm")

    def test_perfectly_separated_stage_raises_a_typed_error(self):
        rng = np.random.default_rng(11)
        n = 400
        c = rng.integers(0, 2, n).astype(float)
        s = (rng.random(n) < 0.5).astype(float)
        z = np.where(s == 0, c, rng.integers(0, 2, n).astype(float))
        a = np.where(s == 1, rng.integers(0, 2, n), 0).astype(float)
        ds = Dataset(y=rng.normal(size=n), a=a, z=z, s=s, c=c.reshape(-1, 1))
        with pytest.raises(SeparationError):
            fit_nuisance_pipeline(ds, SAMPLE_CONFIG, "nem")


class TestEfficientIndex:

    @staticmethod
    def _uniform_law():
        flat = np.array([0.0])
        spec = GLMSpec(Family.binomial_logit, (intercept(),))
        tau = FittedModel(spec, flat, True, 0)
        alpha = FittedModel(spec, flat, True, 0)
        return JointLawZS(tau, alpha, np.array([0.0]), (intercept(),))

    @staticmethod
    def _with_mu(nuis, coefs):
        mu = FittedModel(GLMSpec(Family.linear_identity,
                                 (intercept(), term(special=("z",)))),
                         np.asarray(coefs, dtype=float), True, 0)
        return dataclasses.replace(nuis, mu=mu)

    def test_uniform_cells_give_the_flat_weight(self, fitted):
        # four equal cells of 1/4 make the total inverse weight 16, and the
        # treatment-mean contrast is 0.5, so the index is 0.5/16 = 0.03125
        nuis = self._with_mu(fitted, [0.2, 0.5])
        got = efficient_m_nem([0.0], nuis, self._uniform_law())
        assert got == pytest.approx([0.03125], abs=1e-12)

    def test_equal_treatment_means_give_a_zero_index(self, fitted):
        nuis = self._with_mu(fitted, [0.7, 0.0])
        got = efficient_m_nem([0.0], nuis, self._uniform_law())
        assert got == pytest.approx([0.0], abs=1e-15)

    def test_treatment_mean_model_is_required(self, fitted):
        assert fitted.mu is None
        with pytest.raises(ConfigurationError, match="treatment-mean"):
            efficient_m_nem([0.0], fitted, self._uniform_law())

    def test_selection_route_pair_has_no_second_component_here(self, fitted):
        # the effect model is the bare treatment indicator, so the signed
        # cell sum of its gradient cancels and the second index is zero
        law = self._uniform_law()
        nuis = self._with_mu(fitted, [0.2, 0.5])
        pi = FittedModel(GLMSpec(Family.binomial_logit, (intercept(),)),
                         np.array([0.0]), True, 0)
        m, h = efficient_h_m_nsm([0.0], nuis, law, JointLawAZ.from_zs(pi, law))
        assert m == pytest.approx(efficient_m_nem([0.0], nuis, law), abs=0)
        assert h == pytest.approx([0.0], abs=1e-15)


class TestEstimatorsOnSampledData:

    def test_multiply_robust_recovers_the_effect(self, sampled, fitted):
        rep = estimate_mr_nem(sampled, fitted)
        assert rep.diagnostics["converged"]
        assert abs(rep.psi_hat[0] - PSI_TRUE) <= 4 * rep.se[0]
        assert 0.03 < rep.se[0] < 0.4

    def test_selection_route_recovers_the_effect(self, sampled, fitted_nsm):
        rep = estimate_mr_nsm(sampled, fitted_nsm)
        assert abs(rep.psi_hat[0] - PSI_TRUE) <= 4 * rep.se[0]

    def test_index_scale_does_not_move_the_root(self, sampled, fitted):
        one = estimate_mr_nem(sampled, fitted,
                              m_fn=lambda c: np.array([1.0 + 0.5 * c[0]]))
        three = estimate_mr_nem(sampled, fitted,
                                m_fn=lambda c: np.array([3.0 + 1.5 * c[0]]))
        assert one.psi_hat[0] == pytest.approx(three.psi_hat[0], abs=1e-10)

    def test_instrument_constant_in_target_rejected(self, sampled, fitted):
        z = np.where(sampled.s == 1, 0.0, sampled.z)
        ds = Dataset(y=sampled.y, a=sampled.a, z=z, s=sampled.s, c=sampled.c)
        with pytest.raises(RelevanceError, match="does not vary"):
            estimate_g_z(ds, fitted)


class TestComparatorsOnGeneratedData:

    @pytest.mark.parametrize("estimator", [estimate_tsls, estimate_g_z,
                                           estimate_g_s, estimate_ipw])
    def test_comparators_recover_under_correct_models(self, wide, estimator):
        ds, _, nuis = wide
        rep = estimator(ds, nuis)
        assert rep.diagnostics["converged"]
        assert abs(rep.psi_hat[0] - 1.0) <= 4 * rep.se[0]
        assert 0.03 < rep.se[0] < 0.5

    def test_multiply_robust_and_efficient_variants(self, wide):
        ds, _, nuis = wide
        mr = estimate_mr_nem(ds, nuis)
        eff = estimate_mr_eff_nem(ds, nuis)
        assert abs(mr.psi_hat[0] - 1.0) <= 4 * mr.se[0]
        assert abs(eff.psi_hat[0] - 1.0) <= 4 * eff.se[0]
        # the optimal index cannot be beaten by the default one here
        assert eff.se[0] < mr.se[0]


class TestConfoundedBenchmark:

    def test_benchmark_is_biased_under_unmeasured_confounding(self, wide):
        ds, _, _ = wide
        rep = benchmark_dr_gest(ds)
        assert 0.15 < rep.psi_hat[0] - 1.0 < 0.35
        # ... and its interval misses the truth by a wide margin
        assert abs(rep.psi_hat[0] - 1.0) > 4 * rep.se[0]

    def test_benchmark_is_clean_when_treatment_is_randomised(self):
        rng = np.random.default_rng(17)
        n = 8000
        c1 = rng.integers(0, 2, n).astype(float)
        c2 = rng.normal(size=n)
        z = rng.integers(0, 2, n).astype(float)
        a = (rng.random(n) < 1.0 / (1.0 + np.exp(-(0.4 * c1 - 0.3 * c2)))
             ).astype(float)
        y = 1.0 + a + 0.5 * c1 + 0.6 * c2 + 0.3 * c1 * c2 + rng.normal(size=n)
        ds = Dataset(y=y, a=a, z=z, s=np.ones(n),
                     c=np.column_stack([c1, c2]))
        rep = benchmark_dr_gest(ds)
        assert abs(rep.psi_hat[0] - 1.0) <= 4 * rep.se[0]

    def test_benchmark_needs_target_rows(self):
        n = 50
        rng = np.random.default_rng(3)
        ds = Dataset(y=rng.normal(size=n), a=np.zeros(n),
                     z=rng.integers(0, 2, n).astype(float),
                     s=np.zeros(n), c=rng.normal(size=(n, 1)))
        with pytest.raises(ConfigurationError, match="no target-population"):
            benchmark_dr_gest(ds)


class TestPanelEstimators:

    @staticmethod
    def _simple_panel(n, rng):
        z = rng.integers(0, 2, n).astype(float)
        a = (rng.random(n) < 0.25 + 0.45 * z).astype(float)
        dy = 0.8 * a + 0.3 + rng.normal(0, 1, n)
        y0 = rng.normal(0, 1, n)
        return PanelDataset(y0=y0, y1=y0 + dy, a=a, z=z,
                            c=np.zeros((n, 1))), z, a, dy

    def test_no_covariate_fit_reduces_to_the_instrument_ratio(self):
        panel, z, a, dy = self._simple_panel(4000, np.random.default_rng(77))
        wald = ((dy[z == 1].mean() - dy[z == 0].mean())
                / (a[z == 1].mean() - a[z == 0].mean()))
        rep = estimate_did_nem(panel, effect_terms=(term(special=("a",)),),
                               level_basis=(intercept(),),
                               z_terms=(intercept(),))
        assert rep.psi_hat[0] == pytest.approx(wald, abs=1e-10)

    def test_selection_route_panel_estimate_is_sane(self):
        panel, *_ = self._simple_panel(4000, np.random.default_rng(78))
        rep = estimate_did_nsm(panel, effect_terms=(term(special=("a",)),),
                               level_basis=(intercept(),),
                               t_basis=(intercept(),),
                               q_basis=(intercept(),),
                               pi_terms=(intercept(),),
                               z_terms=(intercept(),))
        assert abs(rep.psi_hat[0] - 0.8) <= 4 * rep.se[0]

    def test_covariate_panel_recovers_the_effect(self):
        rng = np.random.default_rng(41)
        n = 6000
        c = rng.normal(size=n)
        z = (rng.random(n) < 1.0 / (1.0 + np.exp(-0.4 * c))).astype(float)
        a = (rng.random(n)
             < 1.0 / (1.0 + np.exp(0.6 - 1.2 * z - 0.3 * c))).astype(float)
        dy = 0.8 * a + 0.5 + 0.7 * c + rng.normal(0, 1, n)
        y0 = rng.normal(0, 1, n)
        panel = PanelDataset(y0=y0, y1=y0 + dy, a=a, z=z, c=c.reshape(-1, 1))
        rep = estimate_did_nem(panel)
        assert abs(rep.psi_hat[0] - 0.8) <= 4 * rep.se[0]
        assert 0.01 < rep.se[0] < 0.5
