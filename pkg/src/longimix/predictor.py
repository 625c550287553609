"""Two-phase predictors for new patients.

Training fits the population model on one outcome group (or, for the
out-class variant, the opposite group).  Prediction for a newly arrived
patient either refits the population model with the newcomer's history
appended as one more patient (``refit_g``, the default) and reads off the
newcomer's random effect from the refit, or keeps the trained parameters
frozen and takes the newcomer's posterior random effect directly
(``frozen_g``).  Fixed-effect predictors ignore history entirely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .cohort import GROUPS, Cohort, FeatureSeries, PatientRecord, add_patient, other_group, select_group
from .errors import EmptyHistoryError, MismatchError, ValidationError
from .model import (
    FittedFixedModel,
    FittedMixedModel,
    ModelSpec,
    blup,
    fit_fixed,
    fit_mixed,
    predict,
)


class PredictorKind(enum.Enum):
    MIXED = "mixed"
    IN_CLASS_FIXED = "in_class_fixed"
    OUT_CLASS_FIXED = "out_class_fixed"


MODES = ("refit_g", "frozen_g")


@dataclass(frozen=True)
class PredictionRequest:
    """A new patient's observed prefix and the times to forecast.

    ``history`` may be None only for the fixed-effect kinds, which do not
    use it.  ``group`` is the outcome label the patient is assumed to share
    with the training group.
    """

    history: FeatureSeries | None
    target_times: tuple[float, ...]
    group: str
    mode: str = "refit_g"

    def __post_init__(self):
        object.__setattr__(self, "target_times", tuple(float(t) for t in self.target_times))
        if not self.target_times:
            raise ValidationError("target_times must be non-empty")
        if not np.isfinite(self.target_times).all():
            raise ValidationError("target_times must be finite")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True, eq=False)
class TrainedPredictor:
    """Immutable trained predictor; forecasting never mutates it."""

    kind: PredictorKind
    group: str
    feature: str
    spec: ModelSpec
    model: FittedMixedModel | FittedFixedModel
    fit_cohort: Cohort  # the patients the model was fitted on
    max_iter: int = 500
    rel_tol: float = 1e-8


@dataclass(frozen=True, eq=False)
class ForecastResult:
    kind: PredictorKind
    mode: str | None
    group: str
    predictions: tuple[tuple[float, float], ...]
    s_x: tuple[float, ...] | None = None

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "kind": self.kind.value,
            "mode": self.mode,
            "group": self.group,
            "predictions": [{"time_weeks": t, "value": v} for t, v in self.predictions],
            "s_x": list(self.s_x) if self.s_x is not None else None,
        }


def train(cohort: Cohort, feature: str, spec: ModelSpec, kind: PredictorKind,
          group: str, max_iter: int = 500, rel_tol: float = 1e-8) -> TrainedPredictor:
    """Fit the requested predictor kind for one outcome group.

    ``mixed`` and ``in_class_fixed`` fit on the group itself;
    ``out_class_fixed`` fits on the opposite group.
    """
    if group not in GROUPS:
        raise ValidationError(f"unknown group label: {group!r}")
    spec = spec.resolved(cohort)
    fit_group = other_group(group) if kind is PredictorKind.OUT_CLASS_FIXED else group
    fit_cohort = select_group(cohort, fit_group)
    if kind is PredictorKind.MIXED:
        model = fit_mixed(fit_cohort, feature, spec, max_iter=max_iter, rel_tol=rel_tol)
    else:
        model = fit_fixed(fit_cohort, feature, spec)
    return TrainedPredictor(
        kind=kind, group=group, feature=feature, spec=spec, model=model,
        fit_cohort=fit_cohort, max_iter=max_iter, rel_tol=rel_tol,
    )


def _newcomer_id(cohort: Cohort) -> str:
    pid = "newpatient"
    existing = set(cohort.patient_ids())
    while pid in existing:
        pid = "_" + pid
    return pid


def forecast(predictor: TrainedPredictor, request: PredictionRequest) -> ForecastResult:
    """Forecast the requested times; pure function of (predictor, request)."""
    if request.group != predictor.group:
        raise MismatchError(
            f"request group {request.group!r} != predictor group {predictor.group!r}"
        )
    times = np.array(request.target_times)

    if predictor.kind is not PredictorKind.MIXED:
        values = predict(predictor.model, times)
        return ForecastResult(
            kind=predictor.kind, mode=None, group=predictor.group,
            predictions=tuple(zip(request.target_times, map(float, values))),
        )

    if request.history is None:
        raise EmptyHistoryError("mixed prediction needs a non-empty history")
    if request.history.feature_name != predictor.feature:
        raise MismatchError(
            f"history feature {request.history.feature_name!r} != predictor "
            f"feature {predictor.feature!r}"
        )

    if request.mode == "frozen_g":
        model = predictor.model
        s_x = blup(model, request.history)
    else:
        pid = _newcomer_id(predictor.fit_cohort)
        newcomer = PatientRecord(pid, predictor.group,
                                 {predictor.feature: request.history})
        refit_cohort = add_patient(predictor.fit_cohort, newcomer)
        model = fit_mixed(refit_cohort, predictor.feature, predictor.spec,
                          max_iter=predictor.max_iter, rel_tol=predictor.rel_tol)
        s_x = model.blups[pid]

    values = predict(model, times, b=s_x)
    return ForecastResult(
        kind=predictor.kind, mode=request.mode, group=predictor.group,
        predictions=tuple(zip(request.target_times, map(float, values))),
        s_x=tuple(float(v) for v in s_x),
    )
