"""Synthetic cohorts with known ground truth.

Substitutes for private clinical data in every experiment: cohorts are drawn
either from the mixed-model family itself (so parameter recovery can be
checked against truth) or from decay-plus-regrowth curves.  Generation is
stream-ordered from a single numpy PCG64 generator, so a spec with the same
seed always produces byte-identical output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .cohort import Cohort, FeatureSeries, GROUPS, PatientRecord
from .errors import SpecError
from .model import ModelSpec, design_matrix

DEFAULT_VISIT_TIMES = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0)

FAMILIES = ("mixed_linear", "mixed_poly2", "growth_curve")


@dataclass(frozen=True)
class GrowthCurveParams:
    """Decay-plus-regrowth curve parameters: baseline y0, decay rate d > 0,
    regrowth slope g."""

    y0: float
    d: float
    g: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.y0, self.d, self.g)):
            raise SpecError("growth-curve parameters must be finite")
        if not self.d > 0:
            raise SpecError(f"decay rate d must be > 0, got {self.d!r}")


def growth_curve(params: GrowthCurveParams, time):
    """y(t) = y0 + exp(-d t) + g t (additive decay term, as printed)."""
    return params.y0 + np.exp(-params.d * np.asarray(time, dtype=float)) + params.g * np.asarray(time, dtype=float)


def growth_curve_multiplicative(params: GrowthCurveParams, time):
    """Variant with the decay applied to the baseline: y0 exp(-d t) + g t."""
    t = np.asarray(time, dtype=float)
    return params.y0 * np.exp(-params.d * t) + params.g * t


def growth_curve_ode(params: GrowthCurveParams, y_init: float, time):
    """Closed-form solution of dy/dt = y0 + exp(-d t) + g t from y(0)=y_init:
    y(t) = y_init + y0 t + (1 - exp(-d t))/d + g t^2 / 2."""
    t = np.asarray(time, dtype=float)
    return y_init + params.y0 * t + (1.0 - np.exp(-params.d * t)) / params.d + 0.5 * params.g * t * t


@dataclass(frozen=True)
class MixedTruth:
    """True mixed-model parameters for one group, in normalized time
    (t / horizon).  sigma2 = 0 and psi = 0 are allowed for degenerate,
    noise-free generation."""

    beta: tuple[float, ...]
    psi: tuple[tuple[float, ...], ...]
    sigma2: float

    def __post_init__(self):
        psi = np.array(self.psi, dtype=float)
        q = len(self.beta)
        if psi.shape != (q, q):
            raise SpecError(f"psi must be {q}x{q} to match beta, got {psi.shape}")
        if not np.allclose(psi, psi.T):
            raise SpecError("psi must be symmetric")
        if float(np.linalg.eigvalsh(psi).min()) < -1e-10 * max(float(np.trace(psi)), 1.0):
            raise SpecError("psi must be positive semi-definite")
        if not (math.isfinite(self.sigma2) and self.sigma2 >= 0):
            raise SpecError(f"sigma2 must be >= 0, got {self.sigma2!r}")


@dataclass(frozen=True)
class GrowthTruth:
    """True growth-curve parameters for one group plus per-patient Gaussian
    spreads on (y0, d, g) and observation noise."""

    params: GrowthCurveParams
    spread_y0: float = 0.0
    spread_d: float = 0.0
    spread_g: float = 0.0
    sigma2: float = 0.0
    multiplicative: bool = False

    def __post_init__(self):
        for name in ("spread_y0", "spread_d", "spread_g", "sigma2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise SpecError(f"{name} must be >= 0, got {v!r}")


DEFAULT_TRUTH = {
    "mixed_linear": {
        "survived": MixedTruth(beta=(100.0, -45.0), psi=((100.0, 0.0), (0.0, 64.0)), sigma2=16.0),
        "deceased": MixedTruth(beta=(100.0, -10.0), psi=((100.0, 0.0), (0.0, 64.0)), sigma2=16.0),
    },
    "mixed_poly2": {
        "survived": MixedTruth(
            beta=(100.0, -80.0, 35.0),
            psi=((100.0, 0.0, 0.0), (0.0, 64.0, 0.0), (0.0, 0.0, 16.0)),
            sigma2=16.0,
        ),
        "deceased": MixedTruth(
            beta=(100.0, 5.0, 10.0),
            psi=((100.0, 0.0, 0.0), (0.0, 64.0, 0.0), (0.0, 0.0, 16.0)),
            sigma2=16.0,
        ),
    },
    "growth_curve": {
        "survived": GrowthTruth(
            params=GrowthCurveParams(y0=80.0, d=1.5, g=-8.0),
            spread_y0=5.0, spread_d=0.3, spread_g=1.5, sigma2=9.0,
        ),
        "deceased": GrowthTruth(
            params=GrowthCurveParams(y0=80.0, d=1.5, g=5.0),
            spread_y0=5.0, spread_d=0.3, spread_g=1.5, sigma2=9.0,
        ),
    },
}


@dataclass(frozen=True)
class CohortSpec:
    """Everything needed to generate one synthetic cohort deterministically."""

    family: str = "mixed_linear"
    n_per_group: int = 19
    horizon_weeks: float = 6.0
    visit_times: tuple[float, ...] = DEFAULT_VISIT_TIMES
    min_obs: int = 3
    feature: str = "volume"
    truth: dict = field(default=None)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family: {self.family!r} (choose from {FAMILIES})")
        if self.n_per_group < 1:
            raise SpecError("n_per_group must be >= 1")
        if not (math.isfinite(self.horizon_weeks) and self.horizon_weeks > 0):
            raise SpecError(f"horizon_weeks must be positive, got {self.horizon_weeks!r}")
        times = tuple(float(t) for t in self.visit_times)
        if sorted(set(times)) != list(times):
            raise SpecError("visit_times must be strictly increasing")
        if times and (times[0] < 0 or times[-1] > 1.5 * self.horizon_weeks):
            raise SpecError("visit_times must lie in [0, 1.5 x horizon]")
        object.__setattr__(self, "visit_times", times)
        if not 3 <= self.min_obs <= len(times):
            raise SpecError(
                f"min_obs must be in [3, {len(times)}], got {self.min_obs}"
            )
        truth = self.truth if self.truth is not None else DEFAULT_TRUTH[self.family]
        if set(truth) != set(GROUPS):
            raise SpecError(f"truth must cover exactly the groups {GROUPS}")
        want = MixedTruth if self.family.startswith("mixed") else GrowthTruth
        for g, t in truth.items():
            if not isinstance(t, want):
                raise SpecError(f"truth[{g!r}] must be a {want.__name__} for family {self.family!r}")
            if isinstance(t, MixedTruth):
                expected = 2 if self.family == "mixed_linear" else 3
                if len(t.beta) != expected:
                    raise SpecError(
                        f"truth[{g!r}].beta must have {expected} terms for {self.family!r}"
                    )
        object.__setattr__(self, "truth", dict(truth))

    def model_spec(self) -> ModelSpec:
        """Fitting spec matching the generating coordinates (mixed families)."""
        basis = "linear" if self.family == "mixed_linear" else "poly2"
        return ModelSpec(basis=basis, time_scale=self.horizon_weeks)

    def to_json_dict(self) -> dict:
        truth = {}
        for g in GROUPS:
            t = self.truth[g]
            d = asdict(t)
            d["kind"] = type(t).__name__
            truth[g] = d
        return {
            "family": self.family,
            "n_per_group": self.n_per_group,
            "horizon_weeks": self.horizon_weeks,
            "visit_times": list(self.visit_times),
            "min_obs": self.min_obs,
            "feature": self.feature,
            "truth": truth,
            "seed": self.seed,
        }


def _psd_sqrt(psi: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(psi)
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def simulate_cohort(spec: CohortSpec):
    """Generate (cohort, truth_record) from the spec.

    Per patient: draw the visit count uniformly from [min_obs, #visits],
    keep that many visits chosen uniformly at random, evaluate the group's
    mean curve plus the patient's random deviation, and add Gaussian noise.
    The truth record echoes the spec and keeps every per-patient draw.
    """
    rng = np.random.default_rng(spec.seed)
    times_all = np.array(spec.visit_times)
    n_visits = len(times_all)
    mixed = spec.family.startswith("mixed")
    mspec = spec.model_spec() if mixed else None

    patients = []
    patient_truth = {}
    for group in GROUPS:
        truth = spec.truth[group]
        if mixed:
            beta = np.array(truth.beta, dtype=float)
            psi_sqrt = _psd_sqrt(np.array(truth.psi, dtype=float))
            noise_sd = math.sqrt(truth.sigma2)
        else:
            noise_sd = math.sqrt(truth.sigma2)
            curve = growth_curve_multiplicative if truth.multiplicative else growth_curve

        for i in range(spec.n_per_group):
            pid = f"{group[0]}{i + 1:03d}"
            k = int(rng.integers(spec.min_obs, n_visits + 1))
            keep = np.sort(rng.choice(n_visits, size=k, replace=False))
            times = times_all[keep]
            if mixed:
                b = psi_sqrt @ rng.standard_normal(len(beta))
                mean = design_matrix(mspec, times) @ (beta + b)
                patient_truth[pid] = {"b": [float(v) for v in b]}
            else:
                p = GrowthCurveParams(
                    y0=truth.params.y0 + truth.spread_y0 * rng.standard_normal(),
                    d=max(truth.params.d + truth.spread_d * rng.standard_normal(), 1e-9),
                    g=truth.params.g + truth.spread_g * rng.standard_normal(),
                )
                mean = curve(p, times)
                patient_truth[pid] = {"y0": p.y0, "d": p.d, "g": p.g}
            values = mean + noise_sd * rng.standard_normal(k)
            series = FeatureSeries.from_pairs(spec.feature, zip(times, values))
            patients.append(PatientRecord(pid, group, {spec.feature: series}))

    cohort = Cohort(tuple(patients), protocol_horizon=spec.horizon_weeks)
    truth_record = {
        "schema_version": 1,
        "generator": "numpy.random.default_rng (PCG64)",
        "spec": spec.to_json_dict(),
        "patients": patient_truth,
    }
    return cohort, truth_record
