"""Grouped longitudinal feature observations and their CSV interchange format.

The canonical on-disk form is a long-format CSV (one row per observation)
with header ``patient_id,group,time_weeks,feature,value``, UTF-8, ``.``
decimal point.  Long format is used because per-patient missingness is the
norm: patients have different visit counts and wide layouts would need
sentinel values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

GROUPS = ("survived", "deceased")

FEATURES = (
    "volume",
    "jacobian_mean",
    "jacobian_variance",
    "jacobian_skewness",
    "jacobian_kurtosis",
)

CSV_HEADER = ("patient_id", "group", "time_weeks", "feature", "value")

DEFAULT_PROTOCOL_HORIZON = 6.0

# Observation times are allowed to overshoot the imaging protocol horizon by
# this factor before the cohort is rejected as implausible.
HORIZON_SLACK = 1.5


def other_group(group: str) -> str:
    """Return the opposite outcome label."""
    if group not in GROUPS:
        raise ValidationError(f"unknown group label: {group!r}")
    return GROUPS[1] if group == GROUPS[0] else GROUPS[0]


@dataclass(frozen=True)
class Observation:
    """One (time, value) measurement. Time is weeks since treatment start."""

    time: float
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time >= 0.0):
            raise ValidationError(f"observation time must be finite and >= 0, got {self.time!r}")
        if not math.isfinite(self.value):
            raise ValidationError(f"observation value must be finite, got {self.value!r}")


@dataclass(frozen=True)
class FeatureSeries:
    """One patient's observations of a single named feature, ordered by time."""

    feature_name: str
    observations: tuple[Observation, ...]

    def __post_init__(self):
        if self.feature_name not in FEATURES:
            raise ValidationError(f"unknown feature: {self.feature_name!r}")
        if len(self.observations) < 1:
            raise ValidationError("a feature series needs at least one observation")
        times = [o.time for o in self.observations]
        for a, b in zip(times, times[1:]):
            if not a < b:
                raise ValidationError(
                    f"observations of {self.feature_name!r} must be strictly "
                    f"increasing in time (got {a} then {b})"
                )

    @classmethod
    def from_pairs(cls, feature_name: str, pairs) -> "FeatureSeries":
        """Build a series from (time, value) pairs, sorting by time (stable)."""
        obs = sorted((Observation(float(t), float(v)) for t, v in pairs), key=lambda o: o.time)
        return cls(feature_name, tuple(obs))

    def times(self) -> np.ndarray:
        return np.array([o.time for o in self.observations], dtype=float)

    def values(self) -> np.ndarray:
        return np.array([o.value for o in self.observations], dtype=float)

    def prefix(self, n: int) -> "FeatureSeries":
        """First ``n`` observations as a new series."""
        if not 1 <= n <= len(self.observations):
            raise ValidationError(f"prefix length {n} out of range for series of length {len(self.observations)}")
        return FeatureSeries(self.feature_name, self.observations[:n])

    def __len__(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class PatientRecord:
    """One patient: outcome group plus per-feature observation series."""

    patient_id: str
    group: str
    series: dict[str, FeatureSeries] = field(default_factory=dict)

    def __post_init__(self):
        if not self.patient_id:
            raise ValidationError("patient_id must be non-empty")
        if self.group not in GROUPS:
            raise ValidationError(f"unknown group label: {self.group!r}")
        for name, s in self.series.items():
            if name != s.feature_name:
                raise ValidationError(
                    f"series key {name!r} disagrees with feature_name {s.feature_name!r}"
                )


@dataclass(frozen=True)
class Cohort:
    """A set of patients under the same imaging protocol.

    Instances are immutable after construction and safe to share across
    concurrent workers.
    """

    patients: tuple[PatientRecord, ...]
    protocol_horizon: float = DEFAULT_PROTOCOL_HORIZON

    def __post_init__(self):
        if not (math.isfinite(self.protocol_horizon) and self.protocol_horizon > 0):
            raise ValidationError(f"protocol_horizon must be positive, got {self.protocol_horizon!r}")
        seen = set()
        bound = self.protocol_horizon * HORIZON_SLACK
        for p in self.patients:
            if p.patient_id in seen:
                raise ValidationError(f"duplicate patient_id: {p.patient_id!r}")
            seen.add(p.patient_id)
            for s in p.series.values():
                last = s.observations[-1].time
                if last > bound:
                    raise ValidationError(
                        f"patient {p.patient_id!r} has an observation at week {last}, "
                        f"beyond {HORIZON_SLACK} x protocol horizon ({bound})"
                    )

    def __len__(self) -> int:
        return len(self.patients)

    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def get(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def with_feature(self, feature: str) -> list[PatientRecord]:
        """Patients that carry at least one observation of ``feature``."""
        return [p for p in self.patients if feature in p.series]


def select_group(cohort: Cohort, group: str) -> Cohort:
    """Sub-cohort of patients whose outcome label matches, order preserved."""
    kept = tuple(p for p in cohort.patients if p.group == group)
    return Cohort(kept, cohort.protocol_horizon)


def drop_patient(cohort: Cohort, patient_id: str) -> Cohort:
    """Cohort without the named patient, order of the rest preserved."""
    kept = tuple(p for p in cohort.patients if p.patient_id != patient_id)
    return Cohort(kept, cohort.protocol_horizon)


def add_patient(cohort: Cohort, patient: PatientRecord) -> Cohort:
    """Cohort with one more patient appended."""
    return Cohort(cohort.patients + (patient,), cohort.protocol_horizon)


def observation_counts(cohort: Cohort, feature: str) -> dict[str, int]:
    """Per-patient count of observations of ``feature`` (0 when absent)."""
    counts = {}
    for p in cohort.patients:
        s = p.series.get(feature)
        counts[p.patient_id] = len(s) if s is not None else 0
    return counts


def _parse_float(text: str, row_num: int, column: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"row {row_num}: non-numeric {column}: {text!r}") from None


def load_cohort(path, format: str = "csv",
                protocol_horizon: float = DEFAULT_PROTOCOL_HORIZON) -> Cohort:
    """Read a long-format CSV into a Cohort.

    Rows may appear in any order; observations are sorted by time per
    (patient, feature).  Duplicate (patient, feature, time) rows, negative
    times, unknown groups or features, and inconsistent group labels for one
    patient are rejected with ValidationError; structurally broken rows with
    ParseError.
    """
    if format != "csv":
        raise ParseError(f"unsupported format: {format!r}")

    order: list[str] = []                      # patient ids in first-appearance order
    groups: dict[str, str] = {}
    pairs: dict[tuple[str, str], list[tuple[float, float]]] = {}

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if tuple(header) != CSV_HEADER:
            raise ParseError(f"{path}: bad header {header!r}, expected {','.join(CSV_HEADER)}")
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"row {row_num}: expected 5 fields, got {len(row)}")
            pid, group, time_s, feature, value_s = row
            if not pid:
                raise ValidationError(f"row {row_num}: empty patient_id")
            if group not in GROUPS:
                raise ValidationError(f"row {row_num}: unknown group label: {group!r}")
            if feature not in FEATURES:
                raise ValidationError(f"row {row_num}: unknown feature: {feature!r}")
            time = _parse_float(time_s, row_num, "time_weeks")
            value = _parse_float(value_s, row_num, "value")
            if pid not in groups:
                order.append(pid)
                groups[pid] = group
            elif groups[pid] != group:
                raise ValidationError(
                    f"row {row_num}: patient {pid!r} labeled both "
                    f"{groups[pid]!r} and {group!r}"
                )
            key = (pid, feature)
            bucket = pairs.setdefault(key, [])
            if any(t == time for t, _ in bucket):
                raise ValidationError(
                    f"row {row_num}: duplicate observation for ({pid}, {feature}, t={time})"
                )
            bucket.append((time, value))

    patients = []
    for pid in order:
        series = {
            feature: FeatureSeries.from_pairs(feature, pairs[(pid, feature)])
            for feature in FEATURES
            if (pid, feature) in pairs
        }
        patients.append(PatientRecord(pid, groups[pid], series))
    return Cohort(tuple(patients), protocol_horizon)


def save_cohort(cohort: Cohort, path) -> None:
    """Write the long-format CSV. Values use shortest round-trip decimal form,
    so save followed by load reproduces every float exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for p in cohort.patients:
            for feature in FEATURES:
                s = p.series.get(feature)
                if s is None:
                    continue
                for o in s.observations:
                    writer.writerow([p.patient_id, p.group, repr(o.time), feature, repr(o.value)])
