"""Simulation-laboratory tests: the data generator, the misspecification
settings, the replication runner's aggregation and failure accounting, and
the results-table serialisation."""
from __future__ import annotations

import csv

import numpy as np
import pytest

from refiv.data import intercept, term
from refiv.errors import ConfigurationError
from refiv.estimators import Method
from refiv.simlab import (FULL_BASIS, REDUCED_BASIS, Setting, SimConfig,
                          _dispatch, generate_dataset, run_replications,
                          scenario_specs, write_results_csv)


class TestGenerator:

    def test_same_seed_reproduces_the_draw(self):
        one = generate_dataset(500, 7)
        two = generate_dataset(500, 7)
        assert np.array_equal(one.y, two.y)
        assert np.array_equal(one.a, two.a)
        assert np.array_equal(one.z, two.z)
        assert np.array_equal(one.s, two.s)
        assert np.array_equal(one.c, two.c)

    def test_different_seed_changes_the_draw(self):
        assert not np.array_equal(generate_dataset(500, 7).y,
                                  generate_dataset(500, 8).y)

    def test_shapes_and_codings(self):
        ds = generate_dataset(400, 3)
        assert ds.n == 400 and ds.p == 2
        assert set(np.unique(ds.z)) <= {0.0, 1.0}
        assert set(np.unique(ds.c[:, 0])) <= {0.0, 1.0}
        assert np.all(np.isfinite(ds.c[:, 1]))

    def test_reference_population_is_structurally_untreated(self):
        ds = generate_dataset(5000, 11)
        assert np.max(ds.a * (1.0 - ds.s)) == 0.0

    def test_population_share_is_roughly_balanced(self):
        # the design puts a bit under half the sample in the target
        # population; the share is a law property, so pin it tightly
        ds = generate_dataset(100000, 123)
        assert ds.s.mean() == pytest.approx(0.496, abs=0.01)

    def test_null_effect_shifts_treated_outcomes_by_exactly_one(self):
        with_eff = generate_dataset(2000, 7)
        without = generate_dataset(2000, 7, null_effect=True)
        assert np.array_equal(with_eff.a, without.a)
        assert with_eff.y - without.y == pytest.approx(with_eff.a, abs=1e-12)

    def test_empty_draw_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_dataset(0, 1)


class TestScenarioSpecs:

    def test_baseline_keeps_every_model_full(self):
        cfg = scenario_specs(Setting.ALL_CORRECT)
        for terms in (cfg.tau_terms, cfg.alpha_terms, cfg.t_basis,
                      cfg.b0_basis, cfg.b1_basis, cfg.rho_basis):
            assert terms == FULL_BASIS
        assert cfg.beta_terms == (term(special=("a",)),)
        assert len(cfg.mu_terms) == 5

    def test_first_setting_drops_the_interaction_from_the_law_models(self):
        cfg = scenario_specs(Setting.M1)
        assert cfg.tau_terms == REDUCED_BASIS
        assert cfg.alpha_terms == REDUCED_BASIS
        assert cfg.t_basis == cfg.b0_basis == cfg.b1_basis == FULL_BASIS

    def test_second_setting_breaks_population_and_outcome_levels(self):
        cfg = scenario_specs(Setting.M2)
        assert cfg.alpha_terms == REDUCED_BASIS
        assert cfg.b0_basis == cfg.b1_basis == REDUCED_BASIS
        assert cfg.tau_terms == cfg.t_basis == FULL_BASIS

    def test_third_setting_breaks_instrument_side_models(self):
        cfg = scenario_specs(Setting.M3)
        assert cfg.tau_terms == cfg.t_basis == cfg.b0_basis == REDUCED_BASIS
        assert cfg.alpha_terms == cfg.b1_basis == FULL_BASIS

    def test_fourth_setting_breaks_every_outcome_model(self):
        cfg = scenario_specs(Setting.M4)
        assert cfg.t_basis == cfg.b0_basis == cfg.b1_basis == REDUCED_BASIS
        assert cfg.tau_terms == cfg.alpha_terms == FULL_BASIS

    def test_ratio_basis_stays_full_everywhere(self):
        for setting in Setting:
            assert scenario_specs(setting).rho_basis == FULL_BASIS

    def test_plain_string_names_accepted(self):
        assert scenario_specs("M2") == scenario_specs(Setting.M2)

    def test_unknown_setting_rejected(self):
        with pytest.raises(ValueError):
            scenario_specs("M9")


class TestSimConfig:

    def test_tiny_samples_rejected(self):
        with pytest.raises(ConfigurationError, match="sample size below 100"):
            SimConfig(n=99, replications=1, seed=1)

    def test_zero_replications_rejected(self):
        with pytest.raises(ConfigurationError, match="at least one repl"):
            SimConfig(n=100, replications=0, seed=1)

    def test_zero_workers_rejected(self):
        with pytest.raises(ConfigurationError, match="at least one worker"):
            SimConfig(n=100, replications=1, seed=1, parallel_workers=0)

    def test_string_names_are_coerced(self):
        cfg = SimConfig(n=100, replications=1, seed=1, setting="M1",
                        estimators=("TSLS",))
        assert cfg.setting is Setting.M1
        assert cfg.estimators == (Method.TSLS,)


@pytest.fixture(scope="module")
def small_run():
    cfg = SimConfig(n=600, replications=8, seed=2026,
                    estimators=(Method.MR_NEM, Method.TSLS))
    return cfg, run_replications(cfg)


class TestRunner:

    def test_aggregates_have_the_expected_shape(self, small_run):
        cfg, res = small_run
        assert set(res.summaries) == set(cfg.estimators)
        assert res.truth == 1.0
        for m in cfg.estimators:
            s = res.summaries[m]
            assert s.failures == 0 and s.n_used == 8 and not s.flagged
            assert s.empirical_se > 0
            assert 0.0 <= s.coverage <= 1.0
            assert abs(s.bias) < 1.0
            assert res.estimates[m].shape == (8,)

    def test_rerun_is_deterministic(self, small_run):
        cfg, res = small_run
        again = run_replications(cfg)
        for m in cfg.estimators:
            assert again.summaries[m].bias == res.summaries[m].bias
            assert again.summaries[m].coverage == res.summaries[m].coverage

    def test_parallel_reduction_matches_serial(self, small_run):
        cfg, res = small_run
        import dataclasses
        par = run_replications(dataclasses.replace(cfg, parallel_workers=2))
        for m in cfg.estimators:
            assert par.summaries[m].bias == res.summaries[m].bias
            assert par.summaries[m].mean_estimated_se == \
                res.summaries[m].mean_estimated_se

    def test_single_replication_has_no_empirical_se(self):
        cfg = SimConfig(n=400, replications=1, seed=9,
                        estimators=(Method.TSLS,))
        res = run_replications(cfg)
        s = res.summaries[Method.TSLS]
        assert s.empirical_se is None and s.n_used == 1
        assert res.csv_rows()[0]["SE"] == ""

    def test_unfittable_estimator_is_counted_and_flagged(self):
        # the selection-bias estimator needs q_basis/pi_terms, which the
        # default setting configs do not carry: every replicate must fail
        cfg = SimConfig(n=300, replications=2, seed=5,
                        estimators=(Method.MR_NSM,))
        res = run_replications(cfg)
        s = res.summaries[Method.MR_NSM]
        assert s.failures == 2 and s.n_used == 0 and s.flagged
        assert np.isnan(s.bias)

    def test_null_effect_centres_the_truth_at_zero(self):
        cfg = SimConfig(n=600, replications=4, seed=12,
                        estimators=(Method.TSLS,), null_effect=True)
        res = run_replications(cfg)
        assert res.truth == 0.0
        assert abs(res.summaries[Method.TSLS].bias) < 1.0

    def test_marginal_estimators_are_not_runnable_here(self):
        ds = generate_dataset(300, 4)
        spec = scenario_specs(Setting.ALL_CORRECT).spec()
        with pytest.raises(ConfigurationError, match="not available"):
            _dispatch(Method.NP_ATT_NEM, ds, None, spec)
        with pytest.raises(ConfigurationError, match="not available"):
            _dispatch(Method.DID_NEM, ds, None, spec)


class TestResultsSerialisation:

    def test_csv_rows_follow_the_table_layout(self, small_run):
        cfg, res = small_run
        rows = res.csv_rows()
        assert [r["Estimator"] for r in rows] == [m.value for m in
                                                  cfg.estimators]
        assert all(r["Model"] == "all_correct" for r in rows)
        assert set(rows[0]) == {"Model", "Estimator", "Bias", "SE", "ESE",
                                "Cov"}

    def test_json_dict_round_trips_the_summaries(self, small_run):
        cfg, res = small_run
        d = res.to_json_dict()
        assert d["setting"] == "all_correct" and d["n"] == 600
        assert d["replications"] == 8 and d["truth"] == 1.0
        stats = d["estimators"][Method.MR_NEM.value]
        assert set(stats) == {"bias", "empirical_se", "mean_estimated_se",
                              "coverage", "failures", "flagged", "n_used"}

    def test_csv_file_has_the_exact_header(self, small_run, tmp_path):
        _, res = small_run
        out = tmp_path / "table.csv"
        write_results_csv(res, out)
        text = out.read_text().splitlines()
        assert text[0] == "Model,Estimator,Bias,SE,ESE,Cov"
        assert len(text) == 3

    def test_csv_file_stacks_multiple_results(self, small_run, tmp_path):
        _, res = small_run
        out = tmp_path / "stacked.csv"
        write_results_csv([res, res], out)
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert {r["Estimator"] for r in rows} == {"TSLS", "MR_NEM"}
