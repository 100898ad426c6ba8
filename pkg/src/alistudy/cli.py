"""Command-line interface: ``alistudy <group> <command> [options]``.

Exit codes: 0 on success, 1 on data or validation errors, 2 on configuration
errors (including bad arguments).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np
import pandas as pd
import yaml

from alistudy import audit, io
from alistudy.ali import COMPONENTS, ThresholdTable, apply_roadmap, compute_ali, profile_from_measurements
from alistudy.designs import KINDS, DesignSpec, select_validation
from alistudy.errors import AliStudyError, ConfigurationError, DataError
from alistudy.logit import compute_residuals, fit_logistic, odds_ratio_ci
from alistudy.seeding import derive_seed
from alistudy.sieve import build_sieve, default_basis_dim
from alistudy.smle import SupportGrid, em_fit, profile_se
from alistudy.waves import load_state, lock_for, update_state


def _thresholds(args) -> ThresholdTable:
    return ThresholdTable.load(args.thresholds) if getattr(args, "thresholds", None) else ThresholdTable.default()


def _emit(obj, path=None):
    if path:
        io.write_json(obj, path)
    else:
        print(io.dumps_json(obj))


def _fit_summary(beta, se, names, cov=None, extra=None) -> dict:
    out = {"coefficients": {}, "odds_ratios": {}}
    scales = {"x": 0.1}
    for j, name in enumerate(names):
        out["coefficients"][name] = {"estimate": beta[j], "se": se[j] if se is not None else None}
        if j == 0 or se is None:
            continue
        s = scales.get(name, 1.0)
        lo, hi = np.exp(s * (beta[j] - 1.959963984540054 * se[j])), np.exp(s * (beta[j] + 1.959963984540054 * se[j]))
        out["odds_ratios"][name] = {"per": s, "or": np.exp(s * beta[j]), "ci_low": lo, "ci_high": hi}
    if cov is not None:
        out["covariance"] = np.asarray(cov).tolist()
    out.update(extra or {})
    return out


# ali compute

def cmd_ali_compute(args):
    table = _thresholds(args)
    extract = io.read_extract(args.extract)
    unknown = [c for c in extract.columns if c not in ("patient_id", "encounter_date", "sex") and c not in COMPONENTS]
    if unknown:
        raise DataError(f"unknown variable columns in extract: {unknown}")
    terms = {}
    if args.chart_terms:
        ct = io.read_csv(args.chart_terms, dtype=str)
        col = "diagnosis_text" if "diagnosis_text" in ct.columns else "term"
        if col not in ct.columns or "patient_id" not in ct.columns:
            raise DataError("diagnoses file needs patient_id and diagnosis_text columns")
        for pid, term in zip(ct["patient_id"], ct[col]):
            terms.setdefault(pid, []).append(term)
    sexes = io.sex_by_patient(extract)
    rows = []
    for pid, grp in extract.groupby("patient_id", sort=False):
        values = {c: grp[c].tolist() for c in COMPONENTS if c in grp.columns}
        prof = profile_from_measurements(values, sexes.get(pid), table)
        if pid in terms:
            prof = apply_roadmap(prof, terms[pid], table)
        ali = compute_ali(prof)
        row = {"patient_id": pid, "ali": np.nan if ali.value is None else ali.value,
               "numerator": ali.numerator, "denominator": ali.denominator,
               "n_recovered": sum(bool(v) for v in prof.recovered.values())}
        row.update({c: prof.stressors[c] for c in COMPONENTS})
        rows.append(row)
    out = pd.DataFrame(rows, columns=["patient_id", "ali", "numerator", "denominator", "n_recovered", *COMPONENTS])
    for c in COMPONENTS:
        out[c] = out[c].astype("Int64")
    if args.patients:
        pts = io.read_csv(args.patients, dtype={"patient_id": str})
        out = pts.merge(out, on="patient_id", how="left")
    io.write_csv(out, args.out)


# fit naive / fit smle

def cmd_fit_naive(args):
    data = io.read_phase_one(args.data)
    fit = fit_logistic(data)
    summary = _fit_summary(fit.beta, fit.se, fit.names, fit.covariance, {"diagnostics": {
        "converged": fit.converged, "iterations": fit.iterations, "log_likelihood": fit.log_likelihood,
        "n": int(data.has_x_star.sum())}})
    for j, name in enumerate(fit.names[1:], start=1):
        s = 0.1 if name == "x" else 1.0
        summary["odds_ratios"][name] = dict(zip(("or", "ci_low", "ci_high"), odds_ratio_ci(fit, j, scale=s)), per=s)
    _emit(summary, args.out)
    if args.residuals:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            r = compute_residuals(fit, data)
        io.write_csv(pd.DataFrame({"patient_id": data.ids, "residual": r}), args.residuals)


def cmd_fit_smle(args):
    p1 = io.read_phase_one(args.data)
    keep = p1.has_x_star
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} patients with absent X*")
        p1 = p1.subset(keep)
    data = io.read_validated(args.validated, p1)
    n_basis = args.n_basis or default_basis_dim(max(data.n_validated, 1))
    order = min(args.order, n_basis)
    xs = p1.x_star
    basis = build_sieve(xs, n_basis, order, knot_x=xs[data.validated], z=p1.z, z_strata=args.z_strata)
    fit = em_fit(data, None, basis, tol=args.tol, max_iter=args.max_iter, extend=args.grid_extend,
                 accelerate=args.accelerate)
    if not args.no_se:
        fit = profile_se(fit, data, SupportGrid(fit.grid), basis, h_scale=args.h_scale,
                         seed=derive_seed(args.seed, "fit smle", "bootstrap"), extend=args.grid_extend)
    _emit(_fit_summary(fit.beta, fit.se, fit.names, fit.covariance, {"diagnostics": {
        "converged": fit.converged, "em_iterations": fit.em_iterations, "log_likelihood": fit.final_loglik,
        "se_method": fit.se_method, "n_basis": basis.n_basis, "n_validated": data.n_validated, "N": len(p1),
        "grid": fit.grid}}), args.out)


# design select

def _parse_params(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigurationError(f"design parameter {item!r} must look like key=value")
        k, v = item.split("=", 1)
        out[k] = yaml.safe_load(v)
    return out


def cmd_design_select(args):
    data = io.read_phase_one(args.data)
    spec = DesignSpec(args.kind, args.n, seed=derive_seed(args.seed, "design select"), params=_parse_params(args.param))
    exclude = []
    wave = args.wave
    if args.exclude:
        exclude += io.read_ids(args.exclude)
    if args.state and os.path.exists(args.state):
        with lock_for(args.state):
            state = load_state(args.state)
        exclude += state.validated_ids
        if wave is None:
            wave = state.wave_index + 1
    residuals = None
    if spec.kind == "RS" or spec.params.get("score") == "residual":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            residuals = compute_residuals(fit_logistic(data), data)
    sel = select_validation(spec, data, residuals=residuals, exclude=exclude)
    wave = 0 if wave is None else wave
    io.write_csv(pd.DataFrame({"patient_id": sel.ids, "stratum": sel.strata, "wave": wave}), args.out)
    if args.spec_out:
        io.write_json({"design": spec.to_dict(), "counts": sel.counts}, args.spec_out)


# audit prepare / ingest / quality

def cmd_audit_prepare(args):
    extract = io.read_extract(args.extract)
    if args.ids:
        ids = set(io.read_ids(args.ids))
        extract = extract[extract["patient_id"].isin(ids)]
    io.write_csv(audit.widen_to_long(extract, _thresholds(args)), args.out)


def cmd_audit_ingest(args):
    wb = io.read_workbook(args.workbook)
    findings = audit.classify_workbook(wb)
    io.write_csv(findings, args.out)
    counts = findings["finding"].value_counts().reindex([f.value for f in audit.Finding], fill_value=0)
    print(io.dumps_json({"rows": len(findings), "findings": counts.to_dict()}))


def cmd_audit_quality(args):
    findings = io.read_workbook(args.findings)
    findings = audit.classify_workbook(findings)
    sexes = io.sex_by_patient(io.read_extract(args.extract)) if args.extract else {}
    table = _thresholds(args)
    profiles = audit.validated_profiles(findings, sexes, table)
    report = audit.quality_from_profiles(profiles, audit.finding_counts(findings), audit.audited_components(findings))
    _emit(report.to_dict(), args.out)
    if args.heatmap:
        io.write_csv(report.to_frame(), args.heatmap)
    if args.validated_out:
        rows = []
        for pid, (pre, post) in profiles.items():
            a, b = compute_ali(pre), compute_ali(post)
            rows.append({"patient_id": pid, "x_star": a.value, "x_validated": b.value,
                         "denominator_pre": a.denominator, "denominator_post": b.denominator})
        io.write_csv(pd.DataFrame(rows, columns=["patient_id", "x_star", "x_validated", "denominator_pre",
                                                 "denominator_post"]), args.validated_out)
    return report


# sim run

def _load_yaml(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError("config file must hold a mapping")
    return cfg


def cmd_sim_run(args):
    from alistudy.sim import SimConfig, run_scenarios, summarize_designs

    cfg = _load_yaml(args.config) if args.config else {}
    scenarios = cfg.pop("scenarios", None) or {"default": {}}
    designs = cfg.pop("designs", ["SRS", "CC", "BCC", "RS"])
    if args.replicates is not None:
        cfg["replicates"] = args.replicates
    if args.jobs is not None:
        cfg["n_jobs"] = args.jobs
    if args.seed_given:
        cfg["seed"] = args.seed
    try:
        base = SimConfig(**cfg)
    except TypeError as exc:
        raise ConfigurationError(f"bad simulation config: {exc}") from None
    progress = None
    if args.progress:
        progress = lambda i, n: print(f"\r{i}/{n}", end="", file=sys.stderr, flush=True)  # noqa: E731
    table = run_scenarios(base, scenarios, designs, progress=progress)
    # wall-clock time would make reruns differ, so it goes to stderr only
    elapsed = table.cells.groupby("scenario", sort=False)["elapsed_s"].first()
    print("\n".join(f"{k}: {v:.1f}s" for k, v in elapsed.items()), file=sys.stderr)
    io.write_csv(table.cells.drop(columns="elapsed_s"), args.out)
    if args.long_out:
        io.write_csv(table.long_format(), args.long_out)
    if args.summary_out:
        io.write_csv(summarize_designs(table), args.summary_out)


# wave advance / status

def cmd_wave_advance(args):
    ids = io.read_ids(args.selection) if args.selection else []
    report = None
    if args.findings:
        findings = audit.classify_workbook(io.read_workbook(args.findings))
        extra = set(findings["patient_id"]) - set(ids)
        if extra:
            raise DataError(f"findings include patients outside this wave's selection: {sorted(extra)[:10]}")
        sexes = io.sex_by_patient(io.read_extract(args.extract)) if args.extract else {}
        profiles = audit.validated_profiles(findings, sexes, _thresholds(args))
        report = audit.quality_from_profiles(profiles, audit.finding_counts(findings), audit.audited_components(findings))
    selection = ids
    if args.design:
        with open(args.design, encoding="utf-8") as fh:
            d = json.load(fh)["design"]
        from alistudy.designs import ValidationSelection

        selection = ValidationSelection(np.array(ids, dtype=object), np.array([], dtype=object), {},
                                        DesignSpec(d["kind"], d["n"], d["seed"], d.get("params", {})))
    state = update_state(args.state, selection, report, budget=args.budget)
    print(io.dumps_json(state.summary()))


def cmd_wave_status(args):
    with lock_for(args.state):
        state = load_state(args.state)
    print(io.dumps_json(state.summary()))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    common.add_argument("--json-errors", action="store_true", default=argparse.SUPPRESS,
                        help="report errors as JSON on stderr")

    parser = argparse.ArgumentParser(prog="alistudy", parents=[common],
                                     description="Allostatic load index audits and two-phase analysis")
    groups = parser.add_subparsers(dest="group", required=True)

    def command(group_parser, name, func, help_):
        p = group_parser.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    def thresholds(p):
        p.add_argument("--thresholds", help="YAML threshold table (default: built-in)")

    ali = groups.add_parser("ali", help="allostatic load index").add_subparsers(dest="command", required=True)
    p = command(ali, "compute", cmd_ali_compute, "per-patient ALI from a wide extract")
    p.add_argument("--extract", required=True)
    p.add_argument("--chart-terms", help="CSV of patient_id,diagnosis_text chart diagnoses for roadmap recovery")
    p.add_argument("--patients", help="CSV of patient-level columns (e.g. y, age) to merge in")
    p.add_argument("--out", required=True)
    thresholds(p)

    fit = groups.add_parser("fit", help="model fitting").add_subparsers(dest="command", required=True)
    p = command(fit, "naive", cmd_fit_naive, "logistic fit on error-prone ALI")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--residuals", help="write per-patient residuals CSV")
    p = command(fit, "smle", cmd_fit_smle, "sieve MLE on a two-phase sample")
    p.add_argument("--data", required=True)
    p.add_argument("--validated", required=True)
    p.add_argument("--out")
    p.add_argument("--n-basis", type=int)
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--z-strata", type=int, default=1)
    p.add_argument("--grid-extend", choices=("union", "observed", "strict"), default="union")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--accelerate", action="store_true")
    p.add_argument("--h-scale", type=float, default=1.0)
    p.add_argument("--no-se", action="store_true")

    design = groups.add_parser("design", help="validation designs").add_subparsers(dest="command", required=True)
    p = command(design, "select", cmd_design_select, "select patients to validate")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, type=str.upper, choices=KINDS)
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--param", action="append", metavar="KEY=VALUE")
    p.add_argument("--exclude", help="CSV of patient ids never to select")
    p.add_argument("--state", help="wave state whose validated ids are excluded")
    p.add_argument("--wave", type=int, help="wave number written to the selection (default: next wave in --state, else 0)")
    p.add_argument("--out", required=True)
    p.add_argument("--spec-out", help="write design provenance JSON")

    aud = groups.add_parser("audit", help="chart-review audits").add_subparsers(dest="command", required=True)
    p = command(aud, "prepare", cmd_audit_prepare, "build a long-format audit workbook")
    p.add_argument("--extract", required=True)
    p.add_argument("--ids", help="CSV of selected patient ids")
    p.add_argument("--out", required=True)
    thresholds(p)
    p = command(aud, "ingest", cmd_audit_ingest, "classify a completed workbook")
    p.add_argument("--workbook", required=True)
    p.add_argument("--out", required=True)
    p = command(aud, "quality", cmd_audit_quality, "data-quality report from findings")
    p.add_argument("--findings", required=True)
    p.add_argument("--extract", help="extract supplying patient sex")
    p.add_argument("--out")
    p.add_argument("--heatmap", help="per-component metrics CSV")
    p.add_argument("--validated-out", help="per-patient pre/post ALI CSV")
    thresholds(p)

    sim = groups.add_parser("sim", help="design simulations").add_subparsers(dest="command", required=True)
    p = command(sim, "run", cmd_sim_run, "compare designs by simulation")
    p.add_argument("--config", help="YAML simulation config")
    p.add_argument("--out", required=True)
    p.add_argument("--long-out")
    p.add_argument("--summary-out")
    p.add_argument("--replicates", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--progress", action="store_true")

    wave = groups.add_parser("wave", help="validation waves").add_subparsers(dest="command", required=True)
    p = command(wave, "advance", cmd_wave_advance, "record a completed wave")
    p.add_argument("--state", required=True)
    p.add_argument("--selection", help="CSV of this wave's patient ids (omit for an empty wave)")
    p.add_argument("--design", help="design provenance JSON from design select")
    p.add_argument("--findings", help="ingested findings for this wave")
    p.add_argument("--extract", help="extract supplying patient sex")
    p.add_argument("--budget", type=int, help="total validation budget (first wave only)")
    thresholds(p)
    p = command(wave, "status", cmd_wave_status, "show the wave state")
    p.add_argument("--state", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.seed_given = hasattr(args, "seed")
    if not args.seed_given:
        args.seed = 0
    json_errors = getattr(args, "json_errors", False)
    try:
        args.func(args)
    except (AliStudyError, FileNotFoundError) as exc:
        code = getattr(exc, "exit_code", 1)
        if json_errors:
            print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
        else:
            print(f"alistudy: error: {exc}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
