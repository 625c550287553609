"""Command-line front end.

Subcommands: simulate, extract, fit, predict, cv, compare.  All reports are
UTF-8 JSON with a schema_version field; every subcommand is deterministic
given its inputs and flags (randomness enters only through ``simulate
--seed``).  Exit status: 0 on success, 2 on usage errors, 1 on runtime
errors with a machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .cohort import load_cohort, save_cohort, select_group
from .errors import LongimixError, ParseError, ValidationError
from .evaluation import KIND_ORDER, CvReport, compare_report, loocv, residual_histogram, residual_rows
from .features import jacobian_stats, tumor_volume
from .model import ModelSpec, fit_fixed, fit_mixed, model_to_json_dict, predict
from .predictor import PredictionRequest, PredictorKind, forecast, train
from .simulate import CohortSpec, DEFAULT_TRUTH, GrowthTruth, simulate_cohort
from .volumes import load_field, load_mask
from .cohort import FeatureSeries

FEATURE_CHOICES = ("volume", "jacobian_mean", "jacobian_variance",
                   "jacobian_skewness", "jacobian_kurtosis")


def _dump_json(obj, out_path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out_path is None:
        sys.stdout.write(text)
    else:
        Path(out_path).write_text(text, encoding="utf-8")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _model_spec(args) -> ModelSpec:
    return ModelSpec(basis=args.basis)


def _parse_kinds(text: str) -> list[PredictorKind]:
    kinds = []
    for name in text.split(","):
        name = name.strip()
        if not name:
            continue
        try:
            kinds.append(PredictorKind(name))
        except ValueError:
            raise ValidationError(
                f"unknown predictor kind {name!r}; choose from "
                f"{','.join(k.value for k in KIND_ORDER)}"
            ) from None
    if not kinds:
        raise ValidationError("no predictor kinds given")
    return kinds


def _load_history(path, feature) -> FeatureSeries:
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ("time_weeks", "value"):
            raise ParseError(f"{path}: history header must be time_weeks,value")
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"{path} row {row_num}: expected 2 fields")
            try:
                pairs.append((float(row[0]), float(row[1])))
            except ValueError:
                raise ParseError(f"{path} row {row_num}: non-numeric field") from None
    if not pairs:
        raise ValidationError(f"{path}: history has no observations")
    return FeatureSeries.from_pairs(feature, pairs)


def _cmd_simulate(args) -> int:
    truth = None
    if args.multiplicative_decay:
        if args.family != "growth_curve":
            raise ValidationError("--multiplicative-decay applies to --family growth_curve only")
        truth = {
            g: GrowthTruth(params=t.params, spread_y0=t.spread_y0, spread_d=t.spread_d,
                           spread_g=t.spread_g, sigma2=t.sigma2, multiplicative=True)
            for g, t in DEFAULT_TRUTH["growth_curve"].items()
        }
    spec = CohortSpec(
        family=args.family,
        n_per_group=args.n_per_group,
        horizon_weeks=args.horizon,
        min_obs=args.min_obs,
        feature=args.feature,
        truth=truth,
        seed=args.seed,
    )
    cohort, truth_record = simulate_cohort(spec)
    out = Path(args.out)
    save_cohort(cohort, out)
    _dump_json(truth_record, out.with_suffix(".truth.json"))
    return 0


def _cmd_extract(args) -> int:
    mask = load_mask(args.mask)
    report = {"schema_version": 1, "backend": kernels.BACKEND,
              "volume": tumor_volume(mask)}
    if args.field is not None:
        field = load_field(args.field)
        if mask.touches_boundary():
            sys.stderr.write(
                "warning: mask touches the volume boundary; one-sided "
                "differences are used there\n"
            )
        source = "gradient" if args.gradient_entries else "determinant"
        stats = jacobian_stats(field, mask, source=source)
        report.update({
            "jacobian_mean": stats.mean,
            "jacobian_variance": stats.variance,
            "jacobian_skewness": stats.skewness,
            "jacobian_kurtosis": stats.kurtosis,
            "stats_source": source,
        })
    _dump_json(report, args.out)
    return 0


def _cmd_fit(args) -> int:
    cohort = load_cohort(args.cohort)
    spec = _model_spec(args)
    group_cohort = select_group(cohort, args.group)
    if args.kind == "mixed":
        model = fit_mixed(group_cohort, args.feature, spec,
                          max_iter=args.max_iter, rel_tol=args.rel_tol)
    else:
        model = fit_fixed(group_cohort, args.feature, spec)
    _dump_json(model_to_json_dict(model), args.out)
    if args.plot_data:
        if args.out is None:
            raise ValidationError("--plot-data needs --out to name the CSV")
        rows = []
        horizon = cohort.protocol_horizon
        grid = np.linspace(0.0, horizon, 25)
        for t, v in zip(grid, predict(model, grid)):
            rows.append(["__population__", float(t), "", float(v)])
        for p in group_cohort.with_feature(args.feature):
            series = p.series[args.feature]
            b = model.blups.get(p.patient_id) if args.kind == "mixed" else None
            fitted = predict(model, series.times(), b=b)
            for o, f in zip(series.observations, fitted):
                rows.append([p.patient_id, o.time, o.value, float(f)])
        _write_csv(Path(args.out).with_suffix(".curves.csv"),
                   ["patient_id", "time_weeks", "observed", "fitted"], rows)
    return 0


def _cmd_predict(args) -> int:
    cohort = load_cohort(args.cohort)
    spec = _model_spec(args)
    kind = PredictorKind(args.kind)
    predictor = train(cohort, args.feature, spec, kind, args.group,
                      max_iter=args.max_iter, rel_tol=args.rel_tol)
    history = None
    if args.history is not None:
        history = _load_history(args.history, args.feature)
    times = tuple(float(t) for t in args.times.split(","))
    request = PredictionRequest(history=history, target_times=times,
                                group=args.group, mode=args.mode)
    result = forecast(predictor, request)
    _dump_json(result.to_json_dict(), args.out)
    return 0


def _cmd_cv(args) -> int:
    cohort = load_cohort(args.cohort)
    spec = _model_spec(args)
    kinds = _parse_kinds(args.kinds)
    report = loocv(cohort, args.feature, spec, kinds, args.group,
                   mode=args.mode, history_len=args.history_len,
                   max_iter=args.max_iter, rel_tol=args.rel_tol)
    if args.out is None:
        if args.plot_data:
            raise ValidationError("--plot-data needs --out DIR")
        _dump_json(report.to_json_dict())
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(report.to_json_dict(), out / "cv_report.json")
    _write_csv(out / "cv_residuals.csv",
               ["patient_id", "kind", "time", "actual", "predicted", "error"],
               residual_rows(report))
    if args.plot_data:
        for kind in kinds:
            bins = residual_histogram(report, kind)
            _write_csv(out / f"cv_hist_{kind.value}.csv",
                       ["bin_left", "bin_right", "count"], bins)
    return 0


def _cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        with open(path, encoding="utf-8") as fh:
            reports.append(CvReport.from_json_dict(json.load(fh)))
    _dump_json(compare_report(reports), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longimix",
        description="Longitudinal mixed-effects modeling of tumor features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_fit_opts(p):
        p.add_argument("--max-iter", type=int, default=500, help="EM iteration cap")
        p.add_argument("--rel-tol", type=float, default=1e-8,
                       help="relative log-likelihood change for convergence")

    p = sub.add_parser("simulate", help="generate a synthetic cohort with ground truth")
    p.add_argument("--out", required=True, help="cohort CSV path; truth JSON lands beside it")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (PCG64)")
    p.add_argument("--family", default="mixed_linear",
                   choices=("mixed_linear", "mixed_poly2", "growth_curve"))
    p.add_argument("--n-per-group", type=int, default=19, help="patients per outcome group")
    p.add_argument("--horizon", type=float, default=6.0, help="protocol horizon in weeks")
    p.add_argument("--min-obs", type=int, default=3, help="minimum visits per patient")
    p.add_argument("--feature", default="volume", choices=FEATURE_CHOICES)
    p.add_argument("--multiplicative-decay", action="store_true",
                   help="growth family: use y0*exp(-d t) + g t instead of the additive form")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("extract", help="compute tumor features from volumetric files")
    p.add_argument("--mask", required=True, help="MSK1 tumor mask file")
    p.add_argument("--field", help="DFLD displacement field file")
    p.add_argument("--gradient-entries", action="store_true",
                   help="take moments over raw gradient entries instead of determinants")
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("fit", help="fit one group's trajectory model")
    p.add_argument("--cohort", required=True, help="long-format cohort CSV")
    p.add_argument("--feature", required=True, choices=FEATURE_CHOICES)
    p.add_argument("--basis", required=True, choices=("linear", "poly2"))
    p.add_argument("--group", required=True, choices=("survived", "deceased"))
    p.add_argument("--kind", default="mixed", choices=("mixed", "fixed"))
    p.add_argument("--out", help="write model JSON here instead of stdout")
    p.add_argument("--plot-data", action="store_true",
                   help="also write fitted-curve CSV next to --out")
    add_fit_opts(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("predict", help="train a predictor and forecast a new patient")
    p.add_argument("--cohort", required=True)
    p.add_argument("--feature", required=True, choices=FEATURE_CHOICES)
    p.add_argument("--basis", required=True, choices=("linear", "poly2"))
    p.add_argument("--group", required=True, choices=("survived", "deceased"))
    p.add_argument("--kind", default="mixed",
                   choices=tuple(k.value for k in KIND_ORDER))
    p.add_argument("--history", help="CSV (time_weeks,value) of the new patient's prefix")
    p.add_argument("--times", required=True, help="comma-separated forecast times in weeks")
    p.add_argument("--mode", default="refit_g", choices=("refit_g", "frozen_g"))
    p.add_argument("--out", help="write forecast JSON here instead of stdout")
    add_fit_opts(p)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("cv", help="leave-one-out cross-validation report")
    p.add_argument("--cohort", required=True)
    p.add_argument("--feature", required=True, choices=FEATURE_CHOICES)
    p.add_argument("--basis", required=True, choices=("linear", "poly2"))
    p.add_argument("--group", required=True, choices=("survived", "deceased"))
    p.add_argument("--kinds", default="mixed,in_class_fixed,out_class_fixed",
                   help="comma-separated predictor kinds")
    p.add_argument("--mode", default="refit_g", choices=("refit_g", "frozen_g"))
    p.add_argument("--history-len", type=int, default=None,
                   help="fixed history prefix length (default: all but the last)")
    p.add_argument("--out", help="output directory (default: report JSON to stdout)")
    p.add_argument("--plot-data", action="store_true",
                   help="also write residual histogram CSVs to --out")
    add_fit_opts(p)
    p.set_defaults(func=_cmd_cv)

    p = sub.add_parser("compare", help="side-by-side table of CV reports")
    p.add_argument("reports", nargs="+", help="cv_report.json files")
    p.add_argument("--out", help="write comparison JSON here instead of stdout")
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LongimixError, OSError) as exc:
        payload = {"schema_version": 1, "error": type(exc).__name__, "message": str(exc)}
        sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
