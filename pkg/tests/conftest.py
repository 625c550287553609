import numpy as np
import pytest

from longimix.cohort import Cohort, FeatureSeries, PatientRecord
from longimix.simulate import CohortSpec, MixedTruth, simulate_cohort


def make_cohort(patients, feature="volume", horizon=6.0):
    """Build a cohort from {pid: (group, [(time, value), ...])}."""
    records = []
    for pid, (group, pairs) in patients.items():
        series = {feature: FeatureSeries.from_pairs(feature, pairs)}
        records.append(PatientRecord(pid, group, series))
    return Cohort(tuple(records), protocol_horizon=horizon)


def recovery_truth(beta=(10.0, -1.0), psi=((4.0, 0.0), (0.0, 0.25)), sigma2=1.0):
    """Same truth for both groups, in normalized-time coordinates."""
    t = MixedTruth(beta=beta, psi=psi, sigma2=sigma2)
    return {"survived": t, "deceased": t}


def simulate_linear(seed=0, n_per_group=19, **truth_kwargs):
    spec = CohortSpec(family="mixed_linear", n_per_group=n_per_group,
                      truth=recovery_truth(**truth_kwargs), seed=seed)
    return simulate_cohort(spec)


@pytest.fixture(scope="session")
def default_cohort():
    """The default 19+19 mixed-linear cohort, seed 0."""
    cohort, _ = simulate_cohort(CohortSpec(seed=0))
    return cohort


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
