"""Longitudinal mixed-effects modeling of tumor features.

Feature extraction from volumetric masks and displacement fields, per-group
fixed+random-effect trajectory models fitted by EM maximum likelihood,
forecasting for new patients, and leave-one-out cross-validation of the
predictors, with a simulator providing ground-truth cohorts.
"""

__version__ = "0.1.0"

from .errors import LongimixError  # noqa: F401
