"""Batch front door: estimate on a CSV, simulate, or cross-fit.

Configuration comes from an optional JSON document (``--config``) whose keys
match the long flag names; explicit flags override document fields.  Every
command writes two files from one ``--output`` base path: ``BASE.json`` with
full per-estimator reports and ``BASE.csv`` with the tabular summary.
"""
from __future__ import annotations

import argparse
import json
import sys
import csv as _csv
from typing import Optional, Sequence

from .data import Dataset, parse_terms, validate
from .errors import ConfigurationError, RefivError
from .estimators import (EstimateReport, Method, ModelConfig,
                         benchmark_dr_gest, estimate_g_s, estimate_g_z,
                         estimate_ipw, estimate_mr_eff_nem,
                         estimate_mr_eff_nsm, estimate_mr_nem,
                         estimate_mr_nsm, estimate_tsls,
                         fit_nuisance_pipeline)
from .crossfit import ParametricPipelineLearner, crossfit_estimate
from .marginal import estimate_np_att_nem, estimate_np_att_nsm, fit_marginal_nuisance
from .simlab import (Setting, SimConfig, TABLE_METHODS, run_replications,
                     scenario_specs, write_results_csv)

_MODEL_KEYS = ("tau", "alpha", "rho", "t", "b0", "b1", "beta", "q", "pi", "mu")


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def _merged_config(args: argparse.Namespace) -> dict:
    doc: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigurationError("config document must be a JSON object")
    for key, value in vars(args).items():
        if key in ("config", "func", "command"):
            continue
        if value is not None:
            doc[key] = value
    return doc


def _parse_methods(raw, default: Sequence[Method]) -> tuple[Method, ...]:
    if raw is None:
        return tuple(default)
    if isinstance(raw, str):
        raw = [x for x in (s.strip() for s in raw.split(",")) if x]
    out = []
    for name in raw:
        try:
            out.append(Method(str(name).strip().upper()))
        except ValueError:
            valid = ", ".join(m.value for m in Method)
            raise ConfigurationError(
                f"unknown estimator {name!r}; valid names: {valid}") from None
    if not out:
        raise ConfigurationError("empty estimator list")
    return tuple(out)


def _default_basis_text(p: int) -> str:
    return " + ".join(["1"] + [f"c{j + 1}" for j in range(p)])


def _model_config(cfg: dict, p: int, *, need_nsm: bool,
                  need_mu: bool) -> ModelConfig:
    base = _default_basis_text(p)
    get = lambda key, default: str(cfg.get(key) or default)
    kwargs = dict(
        tau_terms=parse_terms(get("tau", base), p),
        alpha_terms=parse_terms(get("alpha", base), p),
        rho_basis=parse_terms(get("rho", base), p),
        t_basis=parse_terms(get("t", base), p),
        b0_basis=parse_terms(get("b0", base), p),
        b1_basis=parse_terms(get("b1", base), p),
        beta_terms=parse_terms(get("beta", "a"), p),
    )
    if need_nsm or cfg.get("q") or cfg.get("pi"):
        kwargs["q_basis"] = parse_terms(get("q", base), p)
        kwargs["pi_terms"] = parse_terms(get("pi", f"z + {base}"), p)
    if need_mu or cfg.get("mu"):
        kwargs["mu_terms"] = parse_terms(get("mu", f"z + {base}"), p)
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# report writers
# ---------------------------------------------------------------------------

def _report_entry(rep: EstimateReport) -> dict:
    warnings = []
    extreme = rep.diagnostics.get("extreme_weight_rows", 0)
    if extreme:
        warnings.append(f"{extreme} rows carried extreme inverse weights")
    return {
        "method": rep.method.value,
        "psi_hat": [float(v) for v in rep.psi_hat],
        "se": [float(v) for v in rep.se],
        "ci_lower": [float(v) for v in rep.ci_lower],
        "ci_upper": [float(v) for v in rep.ci_upper],
        "converged": bool(rep.diagnostics.get("converged", True)),
        "warnings": warnings,
    }


def _write_estimate_outputs(reports: Sequence[EstimateReport],
                            out_base: str) -> tuple[str, str]:
    json_path, csv_path = f"{out_base}.json", f"{out_base}.csv"
    with open(json_path, "w") as fh:
        json.dump({"reports": [_report_entry(r) for r in reports]}, fh,
                  indent=2)
        fh.write("\n")
    with open(csv_path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["Estimator", "Estimate", "CI_low", "CI_high"])
        for rep in reports:
            k = rep.psi_hat.shape[0]
            for j in range(k):
                name = rep.method.value if k == 1 else f"{rep.method.value}:{j}"
                writer.writerow([name, repr(float(rep.psi_hat[j])),
                                 repr(float(rep.ci_lower[j])),
                                 repr(float(rep.ci_upper[j]))])
    return json_path, csv_path


def _fail(exc: Exception) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

_PIPELINE_METHODS = {Method.TSLS, Method.GZ, Method.GS, Method.IPW,
                     Method.MR_NEM, Method.MR_NSM, Method.MR_EFF_NEM,
                     Method.MR_EFF_NSM}
_NSM_METHODS = {Method.MR_NSM, Method.MR_EFF_NSM}
_MARGINAL_METHODS = {Method.NP_ATT_NEM, Method.NP_ATT_NSM}


def _run_estimators(ds: Dataset, cfg: dict,
                    methods: Sequence[Method]) -> list[EstimateReport]:
    report = validate(ds)
    if not report.ok:
        raise ConfigurationError("; ".join(report.violations))
    unsupported = [m for m in methods
                   if m in (Method.DID_NEM, Method.DID_NSM)]
    if unsupported:
        raise ConfigurationError(
            "panel estimators need two-period data and are not available on "
            "the single-period CSV schema")
    need_nsm = any(m in _NSM_METHODS for m in methods)
    need_mu = any(m in (Method.MR_EFF_NEM, Method.MR_EFF_NSM)
                  for m in methods)
    nuis = None
    if any(m in _PIPELINE_METHODS for m in methods):
        model_config = _model_config(cfg, ds.p, need_nsm=need_nsm,
                                     need_mu=need_mu)
        nuis = fit_nuisance_pipeline(ds, model_config,
                                     "nsm" if need_nsm else "nem")
    marg = marg_nsm = None
    if Method.NP_ATT_NEM in methods:
        marg = fit_marginal_nuisance(ds)
    if Method.NP_ATT_NSM in methods:
        marg_nsm = fit_marginal_nuisance(ds, nsm=True)

    B = cfg.get("bootstrap")
    out = []
    for m in methods:
        if m is Method.NP_ATT_NEM:
            out.append(estimate_np_att_nem(
                ds, marg, bootstrap=B, refit=fit_marginal_nuisance,
                seed=int(cfg.get("seed", 0))))
        elif m is Method.NP_ATT_NSM:
            out.append(estimate_np_att_nsm(
                ds, marg_nsm, bootstrap=B,
                refit=lambda d: fit_marginal_nuisance(d, nsm=True),
                seed=int(cfg.get("seed", 0))))
        elif m is Method.DR_GEST_BENCHMARK:
            out.append(benchmark_dr_gest(ds))
        elif m is Method.TSLS:
            out.append(estimate_tsls(ds, nuis))
        elif m is Method.GZ:
            out.append(estimate_g_z(ds, nuis))
        elif m is Method.GS:
            out.append(estimate_g_s(ds, nuis))
        elif m is Method.IPW:
            out.append(estimate_ipw(ds, nuis))
        elif m is Method.MR_NEM:
            out.append(estimate_mr_nem(ds, nuis))
        elif m is Method.MR_NSM:
            out.append(estimate_mr_nsm(ds, nuis))
        elif m is Method.MR_EFF_NEM:
            out.append(estimate_mr_eff_nem(ds, nuis))
        elif m is Method.MR_EFF_NSM:
            out.append(estimate_mr_eff_nsm(ds, nuis))
        else:
            raise ConfigurationError(f"estimator {m.value} is not wired into "
                                     "the command line")
    return out


def cmd_estimate(args: argparse.Namespace) -> int:
    try:
        cfg = _merged_config(args)
        input_path = cfg.get("input")
        if not input_path:
            raise ConfigurationError("no input CSV given (--input)")
        out_base = cfg.get("output") or "refiv_estimate"
        ds = Dataset.from_csv(str(input_path))
        methods = _parse_methods(cfg.get("estimators"), TABLE_METHODS)
        reports = _run_estimators(ds, cfg, methods)
        json_path, csv_path = _write_estimate_outputs(reports, str(out_base))
        print(f"wrote {json_path} and {csv_path}")
        return 0
    except (RefivError, OSError, json.JSONDecodeError) as exc:
        return _fail(exc)


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        cfg = _merged_config(args)
        reps = cfg.get("reps")
        if reps is None:
            raise ConfigurationError("no replication count given (--reps)")
        setting = Setting(str(cfg.get("setting", "all_correct")))
        sim = SimConfig(
            n=int(cfg.get("n", 5000)),
            replications=int(reps),
            seed=int(cfg.get("seed", 0)),
            setting=setting,
            estimators=_parse_methods(cfg.get("estimators"), TABLE_METHODS),
            parallel_workers=int(cfg.get("workers", 1)),
            null_effect=bool(cfg.get("null_effect", False)),
        )
        result = run_replications(sim)
        out_base = cfg.get("output") or "refiv_simulate"
        csv_path, json_path = f"{out_base}.csv", f"{out_base}.json"
        write_results_csv(result, csv_path)
        with open(json_path, "w") as fh:
            json.dump(result.to_json_dict(), fh, indent=2)
            fh.write("\n")
        print(f"wrote {json_path} and {csv_path}")
        return 0
    except ValueError as exc:
        return _fail(ConfigurationError(str(exc)))
    except (RefivError, OSError) as exc:
        return _fail(exc)


def cmd_crossfit(args: argparse.Namespace) -> int:
    try:
        cfg = _merged_config(args)
        input_path = cfg.get("input")
        if not input_path:
            raise ConfigurationError("no input CSV given (--input)")
        ds = Dataset.from_csv(str(input_path))
        report = validate(ds)
        if not report.ok:
            raise ConfigurationError("; ".join(report.violations))
        mode = str(cfg.get("mode", "nem")).lower()
        efficient = bool(cfg.get("efficient", False))
        model_config = _model_config(cfg, ds.p, need_nsm=(mode == "nsm"),
                                     need_mu=efficient)
        learner = ParametricPipelineLearner(model_config, mode)
        rep = crossfit_estimate(
            ds, int(cfg.get("k", 5)), int(cfg.get("seed", 0)), learner, mode,
            model_config.spec(), efficient=efficient,
            localized=bool(cfg.get("localized", False)))
        out_base = cfg.get("output") or "refiv_crossfit"
        json_path, csv_path = _write_estimate_outputs([rep], str(out_base))
        print(f"wrote {json_path} and {csv_path}")
        return 0
    except (RefivError, OSError, json.JSONDecodeError) as exc:
        return _fail(exc)


# ---------------------------------------------------------------------------
# argument parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config document; flags override it")
    p.add_argument("--output", help="output base path (writes BASE.json and "
                                    "BASE.csv)")
    p.add_argument("--seed", type=int)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    for key in _MODEL_KEYS:
        p.add_argument(f"--{key}", metavar="TERMS",
                       help=f"term list for the {key} model, e.g. "
                            "'1 + c1 + c2 + c1:c2'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refiv",
        description="Treatment-effect estimation with a reference-population "
                    "instrument: batch estimation, simulation, cross-fitting.")
    sub = parser.add_subparsers(dest="command", required=True)

    pe = sub.add_parser("estimate", help="run estimators on a CSV dataset")
    _add_common(pe)
    _add_model_flags(pe)
    pe.add_argument("--input", help="input CSV (y,a,z,s,c1..cp)")
    pe.add_argument("--estimators", help="comma-separated estimator names")
    pe.add_argument("--mode", choices=["nem", "nsm"])
    pe.add_argument("--bootstrap", type=int, metavar="B",
                    help="bootstrap replicates for the marginal estimators")
    pe.set_defaults(func=cmd_estimate)

    ps = sub.add_parser("simulate", help="run the Monte Carlo study")
    _add_common(ps)
    ps.add_argument("--setting",
                    choices=[s.value for s in Setting])
    ps.add_argument("--n", type=int)
    ps.add_argument("--reps", type=int)
    ps.add_argument("--workers", type=int)
    ps.add_argument("--estimators", help="comma-separated estimator names")
    ps.add_argument("--null-effect", dest="null_effect", action="store_const",
                    const=True)
    ps.set_defaults(func=cmd_simulate)

    pc = sub.add_parser("crossfit", help="cross-fit estimation on a CSV")
    _add_common(pc)
    _add_model_flags(pc)
    pc.add_argument("--input", help="input CSV (y,a,z,s,c1..cp)")
    pc.add_argument("--k", type=int, help="number of folds")
    pc.add_argument("--mode", choices=["nem", "nsm"])
    pc.add_argument("--efficient", action="store_const", const=True)
    pc.add_argument("--localized", action="store_const", const=True)
    pc.set_defaults(func=cmd_crossfit)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
