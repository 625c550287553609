"""Exception hierarchy shared by all longimix modules."""


class LongimixError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(LongimixError):
    """Malformed input file: bad header, wrong column count, non-numeric field."""


class ValidationError(LongimixError):
    """Well-formed input that violates a data invariant."""


class DimensionError(LongimixError):
    """Grid too small for the requested stencil."""


class MismatchError(LongimixError):
    """Two inputs that must agree (dims, spacing, feature, spec) do not."""


class EmptyMaskError(LongimixError):
    """Mask selects no voxels."""


class InsufficientDataError(LongimixError):
    """Not enough patients or observations for the requested fit."""


class RankDeficientError(LongimixError):
    """Design matrix does not have full column rank."""


class NumericalError(LongimixError):
    """Linear algebra failed even after a jitter retry."""


class DivergenceError(LongimixError):
    """Iterative fit produced a non-finite objective."""


class EmptyHistoryError(LongimixError):
    """Mixed-effect prediction requested without any history observations."""


class SpecError(LongimixError):
    """Simulation specification violates its invariants."""
