"""Treatment-effect estimation with a reference-population instrument.

A measured covariate whose outcome association is anchored in a population
that cannot receive treatment becomes a usable instrument in the population
that can.  This package fits the working models, solves the multiply robust
estimating equations for conditional effects, computes one-step marginal
effects, cross-fits, and reproduces the accompanying Monte Carlo study.
"""

from .data import (CovariateFrame, Dataset, Family, GLMSpec, Observation,
                   PanelDataset, Term, ValidationReport, build_design,
                   design_row, intercept, parse_terms, term, validate)
from .errors import (BootstrapInstabilityError, ConfigurationError,
                     ConvergenceError, DegenerateLawError,
                     ExtremeWeightWarning, RefivError, RelevanceError,
                     SchemaError, SeparationError, SingularDesignError)
from .fitting import (FittedModel, RootResult, VarianceReport, bootstrap_se,
                      expit, fit_glm, logit, sandwich_variance,
                      solve_estimating_equations)
from .jointlaw import (AceResult, JointLawAZ, JointLawZS, ace_project,
                       cells_zs, estimate_rho, joint_zs_cell, kappa_binary,
                       phi_binary, signed_az_weight, signed_zs_weight,
                       strip_specials)
from .estimators import (DidNuisanceSet, EstimateReport, Method, ModelConfig,
                         NuisanceSet, StructuralSpec, benchmark_dr_gest,
                         effect_score, efficient_h_m_nsm, efficient_m_nem,
                         estimate_did_nem, estimate_did_nsm, estimate_g_s,
                         estimate_g_z, estimate_ipw, estimate_mr_eff_nem,
                         estimate_mr_eff_nsm, estimate_mr_nem,
                         estimate_mr_nsm, estimate_tsls, fit_did_nuisances,
                         fit_nuisance_pipeline, residual_epsilon,
                         residual_epsilon_star)
from .marginal import (MarginalNuisance, beta_c, delta_a, delta_y,
                       eif1_values, eif2_values, estimate_np_att_nem,
                       estimate_np_att_nsm, fit_marginal_nuisance, gamma_c)
from .crossfit import (FoldPlan, NuisanceLearner, ParametricPipelineLearner,
                       crossfit_estimate, make_folds)
from .simlab import (Setting, SimConfig, SimResult, TABLE_METHODS,
                     generate_dataset, run_replications, scenario_specs,
                     write_results_csv)

__version__ = "0.1.0"

__all__ = [
    "AceResult", "BootstrapInstabilityError", "ConfigurationError",
    "ConvergenceError", "CovariateFrame", "Dataset", "DegenerateLawError",
    "DidNuisanceSet", "EstimateReport", "ExtremeWeightWarning", "Family",
    "FittedModel", "FoldPlan", "GLMSpec", "JointLawAZ", "JointLawZS",
    "MarginalNuisance", "Method", "ModelConfig", "NuisanceLearner",
    "NuisanceSet", "Observation", "PanelDataset",
    "ParametricPipelineLearner", "RefivError", "RelevanceError",
    "RootResult", "SchemaError", "SeparationError", "Setting", "SimConfig",
    "SimResult", "SingularDesignError", "StructuralSpec", "TABLE_METHODS",
    "Term", "ValidationReport", "VarianceReport", "ace_project",
    "benchmark_dr_gest", "beta_c", "bootstrap_se", "build_design",
    "cells_zs", "crossfit_estimate", "delta_a", "delta_y", "design_row",
    "effect_score", "efficient_h_m_nsm", "efficient_m_nem", "eif1_values",
    "eif2_values", "estimate_did_nem", "estimate_did_nsm", "estimate_g_s",
    "estimate_g_z", "estimate_ipw", "estimate_mr_eff_nem",
    "estimate_mr_eff_nsm", "estimate_mr_nem", "estimate_mr_nsm",
    "estimate_np_att_nem", "estimate_np_att_nsm", "estimate_rho",
    "estimate_tsls", "expit", "fit_did_nuisances", "fit_glm",
    "fit_marginal_nuisance", "fit_nuisance_pipeline", "gamma_c",
    "generate_dataset", "intercept", "joint_zs_cell", "kappa_binary",
    "logit", "make_folds", "parse_terms", "phi_binary", "residual_epsilon",
    "residual_epsilon_star", "run_replications", "sandwich_variance",
    "scenario_specs", "signed_az_weight", "signed_zs_weight",
    "solve_estimating_equations", "strip_specials", "term", "validate",
    "write_results_csv",
]
