"""Cross-fitting wrapper tests: fold plans, the K=1 no-split identity, the
fold-average property, determinism in the seed, and nuisance learners
(pipeline-backed, oracle, and failing)."""
from __future__ import annotations

import numpy as np
import pytest

from refiv.crossfit import (FoldPlan, NuisanceLearner,
                            ParametricPipelineLearner, crossfit_estimate,
                            make_folds)
from refiv.data import Dataset, Family, GLMSpec, intercept, term
from refiv.errors import ConfigurationError, ConvergenceError
from refiv.estimators import (Method, ModelConfig, NuisanceSet, effect_score,
                              estimate_mr_nem, fit_nuisance_pipeline)
from refiv.fitting import FittedModel, _fd_jacobian, logit

# ---------------------------------------------------------------------------
# sampling law shared by the estimation tests (binary covariate)
# ---------------------------------------------------------------------------

F_C1 = 2.0 / 5.0
F_ZS = {
    (0, 0, 0): 6 / 20, (0, 1, 0): 4 / 20, (0, 0, 1): 5 / 20, (0, 1, 1): 5 / 20,
    (1, 0, 0): 4 / 20, (1, 1, 0): 6 / 20, (1, 0, 1): 3 / 20, (1, 1, 1): 7 / 20,
}
PI = {(0, 0): 5 / 20, (1, 0): 14 / 20, (0, 1): 6 / 20, (1, 1): 15 / 20}
PSI_TRUE = 0.7

C_BASIS = (intercept(), term(c=(0,)))
CONFIG = ModelConfig(tau_terms=C_BASIS, alpha_terms=C_BASIS,
                     rho_basis=C_BASIS, t_basis=C_BASIS, b0_basis=C_BASIS,
                     b1_basis=C_BASIS, beta_terms=(term(special=("a",)),))


def draw_sample(n, rng):
    c = (rng.random(n) < F_C1).astype(float)
    z = np.empty(n)
    s = np.empty(n)
    for i in range(n):
        ci = int(c[i])
        probs = [F_ZS[(ci, zz, ss)] for zz in (0, 1) for ss in (0, 1)]
        k = rng.choice(4, p=probs)
        z[i], s[i] = divmod(k, 2)
    pvec = np.array([PI[(int(zz), int(cc))] for zz, cc in zip(z, c)])
    a = np.where(s == 1, (rng.random(n) < pvec), 0.0).astype(float)
    y = (0.5 - 0.9 * c + s * (0.75 - 0.5 * c) + (0.5 - 0.75 * c) * z
         + PSI_TRUE * a * s + rng.normal(0, 1, n))
    return Dataset(y=y, a=a, z=z, s=s, c=c.reshape(-1, 1))


@pytest.fixture(scope="module")
def sample():
    return draw_sample(4000, np.random.default_rng(21))


class TestFoldPlans:

    def test_single_fold_holds_every_row(self):
        plan = make_folds(10, 1, seed=0)
        assert plan.K == 1
        assert np.array_equal(plan.indices(0), np.arange(10))

    def test_even_split_is_balanced_and_disjoint(self):
        plan = make_folds(10, 2, seed=3)
        a, b = plan.indices(0), plan.indices(1)
        assert a.size == b.size == 5
        assert np.array_equal(np.sort(np.concatenate([a, b])), np.arange(10))

    def test_uneven_split_differs_by_at_most_one(self):
        plan = make_folds(7, 3, seed=3)
        sizes = sorted(plan.indices(k).size for k in range(3))
        assert sizes == [2, 2, 3]

    def test_same_seed_reproduces_the_plan(self):
        one = make_folds(50, 5, seed=11)
        two = make_folds(50, 5, seed=11)
        assert np.array_equal(one.assignments, two.assignments)

    def test_different_seed_changes_the_plan(self):
        one = make_folds(50, 5, seed=11)
        two = make_folds(50, 5, seed=12)
        assert not np.array_equal(one.assignments, two.assignments)

    def test_more_folds_than_rows_rejected(self):
        with pytest.raises(ConfigurationError, match="cannot split"):
            make_folds(3, 4, seed=0)

    def test_zero_folds_rejected(self):
        with pytest.raises(ConfigurationError, match="at least one fold"):
            make_folds(10, 0, seed=0)


class TestNoSplitIdentity:

    def test_single_fold_matches_the_plain_estimator_bitwise(self, sample):
        cf = crossfit_estimate(sample, 1, 7, ParametricPipelineLearner(CONFIG))
        plain = estimate_mr_nem(sample,
                                fit_nuisance_pipeline(sample, CONFIG, "nem"))
        assert cf.psi_hat[0] == plain.psi_hat[0]  # bit-for-bit

    def test_single_fold_se_is_the_effect_only_sandwich(self, sample):
        cf = crossfit_estimate(sample, 1, 7, ParametricPipelineLearner(CONFIG))
        nuis = fit_nuisance_pipeline(sample, CONFIG, "nem")
        spec = CONFIG.spec()

        def mean_rows(p):
            return effect_score(sample, nuis, spec, p).mean(axis=0)

        rows = effect_score(sample, nuis, spec, cf.psi_hat)
        V = rows.T @ rows / sample.n
        J = _fd_jacobian(mean_rows, cf.psi_hat, mean_rows(cf.psi_hat))
        Ji = np.linalg.inv(J)
        manual = float(np.sqrt((Ji @ V @ Ji.T / sample.n)[0, 0]))
        assert cf.se[0] == pytest.approx(manual, rel=1e-12)


class TestCrossfitEstimation:

    def test_estimate_averages_the_fold_solutions(self, sample):
        rep = crossfit_estimate(sample, 5, 7, ParametricPipelineLearner(CONFIG))
        folds = np.asarray(rep.diagnostics["fold_estimates"])
        assert folds.shape == (5, 1)
        assert rep.psi_hat[0] == pytest.approx(folds[:, 0].mean(), abs=1e-15)
        assert rep.diagnostics["fold_sizes"] == [800] * 5
        assert rep.diagnostics["crossfit_K"] == 5

    def test_five_folds_stay_near_the_full_sample_estimate(self, sample):
        full = estimate_mr_nem(sample,
                               fit_nuisance_pipeline(sample, CONFIG, "nem"))
        cf = crossfit_estimate(sample, 5, 7, ParametricPipelineLearner(CONFIG))
        combined = float(np.hypot(full.se[0], cf.se[0]))
        assert abs(cf.psi_hat[0] - full.psi_hat[0]) <= 2.0 * combined
        assert abs(cf.psi_hat[0] - PSI_TRUE) <= 4.0 * cf.se[0]

    def test_same_seed_reproduces_the_estimate_bitwise(self, sample):
        learner = ParametricPipelineLearner(CONFIG)
        one = crossfit_estimate(sample, 5, 7, learner)
        two = crossfit_estimate(sample, 5, 7, learner)
        assert one.psi_hat[0] == two.psi_hat[0]
        assert one.se[0] == two.se[0]

    def test_different_seed_moves_the_folds_and_the_estimate(self, sample):
        learner = ParametricPipelineLearner(CONFIG)
        one = crossfit_estimate(sample, 5, 7, learner)
        two = crossfit_estimate(sample, 5, 8, learner)
        assert one.psi_hat[0] != two.psi_hat[0]

    def test_localized_pass_with_the_default_learner_changes_nothing(
            self, sample):
        learner = ParametricPipelineLearner(CONFIG)
        plain = crossfit_estimate(sample, 5, 7, learner)
        local = crossfit_estimate(sample, 5, 7, learner, localized=True)
        assert local.psi_hat[0] == plain.psi_hat[0]
        assert local.diagnostics["localized"] is True
        assert plain.diagnostics["localized"] is False


class OracleLearner(NuisanceLearner):
    """Returns the data-generating coefficients regardless of the subset."""

    def train(self, dataset):
        def two_point_logit(v0, v1):
            return np.array([logit(v0), logit(v1) - logit(v0)])

        def two_point(v0, v1):
            return np.array([v0, v1 - v0])

        def margins(c):
            tau = F_ZS[(c, 1, 0)] / (F_ZS[(c, 0, 0)] + F_ZS[(c, 1, 0)])
            alpha = F_ZS[(c, 0, 1)] / (F_ZS[(c, 0, 0)] + F_ZS[(c, 0, 1)])
            lor = np.log(F_ZS[(c, 1, 1)] * F_ZS[(c, 0, 0)]
                         / (F_ZS[(c, 1, 0)] * F_ZS[(c, 0, 1)]))
            return tau, alpha, lor
        m0, m1 = margins(0), margins(1)
        glm = GLMSpec(Family.binomial_logit, C_BASIS)
        return NuisanceSet(
            config=CONFIG,
            tau=FittedModel(glm, two_point_logit(m0[0], m1[0]), True, 0),
            alpha=FittedModel(glm, two_point_logit(m0[1], m1[1]), True, 0),
            rho=two_point(m0[2], m1[2]),
            nu=two_point(0.5, -0.25),
            theta0=two_point(0.5, -0.4),
            theta1=two_point(0.75, 0.25),
            nu_tilde=two_point(0.5, -0.25),
            psi_tilde=np.array([PSI_TRUE]),
        )


class FailingLearner(NuisanceLearner):

    def train(self, dataset):
        raise ConfigurationError("this learner always fails")


class TestLearners:

    def test_oracle_nuisances_recover_the_effect(self, sample):
        rep = crossfit_estimate(sample, 3, 5, OracleLearner())
        assert abs(rep.psi_hat[0] - PSI_TRUE) <= 4.0 * rep.se[0]

    def test_training_failure_is_wrapped_with_the_fold_label(self, sample):
        with pytest.raises(ConvergenceError,
                           match="nuisance training failed"):
            crossfit_estimate(sample, 3, 5, FailingLearner())

    def test_pipeline_learner_mode_is_forwarded(self, sample):
        import dataclasses
        cfg = dataclasses.replace(
            CONFIG, q_basis=C_BASIS,
            pi_terms=(intercept(), term(special=("z",)), term(c=(0,))))
        rep = crossfit_estimate(sample, 2, 9,
                                ParametricPipelineLearner(cfg, mode="nsm"),
                                mode="nsm")
        assert rep.method is Method.MR_NSM
        assert abs(rep.psi_hat[0] - PSI_TRUE) <= 4.0 * rep.se[0]
