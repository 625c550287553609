"""Leave-one-out cross-validation of the predictors.

Each eligible patient of the chosen group is held out once: every predictor
kind is trained on the remaining patients (the out-class kind keeps the full
opposite group), the held-out patient's series is split into history (all
observations but the last, or a fixed prefix length) and target (the last
observation), and the residual at the target time is recorded.  Folds that
fail to train are kept as explicit failure entries and excluded from the
aggregates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import Cohort, drop_patient, select_group
from .errors import InsufficientDataError, LongimixError, MismatchError
from .model import ModelSpec
from .predictor import MODES, PredictionRequest, PredictorKind, forecast, train

KIND_ORDER = (PredictorKind.MIXED, PredictorKind.IN_CLASS_FIXED, PredictorKind.OUT_CLASS_FIXED)

MIN_OBS_FOR_FOLD = 3  # 2 history points + 1 target


@dataclass(frozen=True)
class FoldResult:
    """One held-out patient under one predictor kind."""

    patient_id: str
    kind: PredictorKind
    residuals: tuple[tuple[float, float, float, float], ...]  # (time, actual, predicted, error)
    history_len: int
    failure: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "kind": self.kind.value,
            "residuals": [
                {"time_weeks": t, "actual": a, "predicted": p, "error": e}
                for t, a, p, e in self.residuals
            ],
            "history_len": self.history_len,
            "failure": self.failure,
        }


@dataclass(frozen=True, eq=False)
class CvReport:
    """All folds for one (feature, group) plus per-kind aggregates."""

    feature: str
    group: str
    spec: ModelSpec
    mode: str
    history_len: int | None
    folds: tuple[FoldResult, ...]
    aggregates: dict[str, dict]

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "feature": self.feature,
            "group": self.group,
            "spec": self.spec.to_json_dict(),
            "mode": self.mode,
            "history_len": self.history_len,
            "folds": [f.to_json_dict() for f in self.folds],
            "aggregates": self.aggregates,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CvReport":
        folds = tuple(
            FoldResult(
                patient_id=f["patient_id"],
                kind=PredictorKind(f["kind"]),
                residuals=tuple(
                    (r["time_weeks"], r["actual"], r["predicted"], r["error"])
                    for r in f["residuals"]
                ),
                history_len=f["history_len"],
                failure=f.get("failure"),
            )
            for f in d["folds"]
        )
        return cls(
            feature=d["feature"],
            group=d["group"],
            spec=ModelSpec.from_json_dict(d["spec"]),
            mode=d["mode"],
            history_len=d.get("history_len"),
            folds=folds,
            aggregates=d["aggregates"],
        )


def _aggregate(folds, kinds) -> dict[str, dict]:
    out = {}
    for kind in kinds:
        errors = []
        n_failed = 0
        for f in folds:
            if f.kind is not kind:
                continue
            if f.failure is not None:
                n_failed += 1
                continue
            errors.extend(e for _, _, _, e in f.residuals)
        if errors:
            arr = np.array(errors)
            metrics = {
                "rmse": float(np.sqrt(np.mean(arr * arr))),
                "mae": float(np.mean(np.abs(arr))),
                "mean_error": float(np.mean(arr)),
            }
        else:
            # every fold of this kind failed; null beats NaN in JSON
            metrics = {"rmse": None, "mae": None, "mean_error": None}
        metrics["n_folds"] = sum(1 for f in folds if f.kind is kind and f.failure is None)
        metrics["n_failed"] = n_failed
        out[kind.value] = metrics
    return out


def eligible_patients(cohort: Cohort, feature: str) -> list[str]:
    """Patients with enough observations to be held out, in id order."""
    ids = [
        p.patient_id
        for p in cohort.with_feature(feature)
        if len(p.series[feature]) >= MIN_OBS_FOR_FOLD
    ]
    return sorted(ids)


def loocv(cohort: Cohort, feature: str, spec: ModelSpec, kinds, group: str,
          mode: str = "refit_g", history_len: int | None = None,
          max_iter: int = 500, rel_tol: float = 1e-8) -> CvReport:
    """Leave-one-out cross-validation over one group.

    ``kinds`` is any iterable of PredictorKind; folds are emitted in
    canonical kind order within each patient, patients in id order, so the
    report (and its JSON form) is deterministic.  ``history_len`` overrides
    the all-but-last history convention with a fixed prefix length.
    """
    spec = spec.resolved(cohort)
    kinds = [k for k in KIND_ORDER if k in set(kinds)]
    if not kinds:
        raise MismatchError("no predictor kinds requested")
    if mode not in MODES:
        raise MismatchError(f"mode must be one of {MODES}, got {mode!r}")
    group_cohort = select_group(cohort, group)
    held_out_ids = eligible_patients(group_cohort, feature)
    if len(held_out_ids) < 3:
        raise InsufficientDataError(
            f"LOOCV needs >= 3 patients with >= {MIN_OBS_FOR_FOLD} observations "
            f"of {feature!r} in group {group!r}, found {len(held_out_ids)}"
        )

    folds = []
    for pid in held_out_ids:
        training = drop_patient(cohort, pid)
        held = group_cohort.get(pid).series[feature]
        n = len(held)
        h = n - 1 if history_len is None else min(history_len, n - 1)
        history = held.prefix(h)
        target = held.observations[-1]
        for kind in kinds:
            try:
                predictor = train(training, feature, spec, kind, group,
                                  max_iter=max_iter, rel_tol=rel_tol)
                request = PredictionRequest(
                    history=history, target_times=(target.time,), group=group, mode=mode,
                )
                (_, predicted), = forecast(predictor, request).predictions
            except LongimixError as exc:
                folds.append(FoldResult(pid, kind, (), h, failure=str(exc)))
                continue
            folds.append(FoldResult(
                pid, kind,
                ((target.time, target.value, predicted, predicted - target.value),),
                h,
            ))

    return CvReport(
        feature=feature,
        group=group,
        spec=spec,
        mode=mode,
        history_len=history_len,
        folds=tuple(folds),
        aggregates=_aggregate(folds, kinds),
    )


def residual_rows(report: CvReport) -> list[list]:
    """Flat rows (patient_id, kind, time, actual, predicted, error) for CSV."""
    rows = []
    for f in report.folds:
        for t, a, p, e in f.residuals:
            rows.append([f.patient_id, f.kind.value, t, a, p, e])
    return rows


def residual_histogram(report: CvReport, kind: PredictorKind, bins: int = 10):
    """Histogram bins of the residual errors for one kind: (left, right, count)."""
    errors = [
        e
        for f in report.folds
        if f.kind is kind and f.failure is None
        for _, _, _, e in f.residuals
    ]
    if not errors:
        return []
    counts, edges = np.histogram(np.array(errors), bins=bins)
    return [
        (float(edges[i]), float(edges[i + 1]), int(counts[i]))
        for i in range(len(counts))
    ]


def compare_report(reports) -> dict:
    """Side-by-side aggregate table for reports sharing feature and spec.

    One column per input report, in input order; each column carries the
    per-kind aggregates plus per-patient winner counts (the kind with the
    smallest absolute error, ties to the canonical kind order).
    """
    reports = list(reports)
    if not reports:
        raise MismatchError("no reports to compare")
    first = reports[0]
    for r in reports[1:]:
        if r.feature != first.feature:
            raise MismatchError(f"feature mismatch: {r.feature!r} != {first.feature!r}")
        if r.spec != first.spec:
            raise MismatchError("spec mismatch between reports")

    columns = []
    for r in reports:
        kinds_present = [k for k in KIND_ORDER if k.value in r.aggregates]
        wins = {k.value: 0 for k in kinds_present}
        by_patient: dict[str, list] = {}
        for f in r.folds:
            if f.failure is None and f.residuals:
                by_patient.setdefault(f.patient_id, []).append(f)
        for pid in sorted(by_patient):
            entries = by_patient[pid]
            best = min(
                entries,
                key=lambda f: (max(abs(e) for _, _, _, e in f.residuals),
                               KIND_ORDER.index(f.kind)),
            )
            wins[best.kind.value] += 1
        columns.append({
            "group": r.group,
            "mode": r.mode,
            "history_len": r.history_len,
            "kinds": {k.value: dict(r.aggregates[k.value]) for k in kinds_present},
            "wins": wins,
        })

    return {
        "schema_version": 1,
        "feature": first.feature,
        "spec": first.spec.to_json_dict(),
        "columns": columns,
    }
