"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: DataError -> 2,
CompatibilityError -> 3, plain I/O failures -> 1.
"""


class DisenPoiError(Exception):
    pass


class DataError(DisenPoiError):
    """Invalid or inconsistent input data."""


class ColumnCountMismatch(DataError):
    pass


class CoordinateOutOfRange(DataError):
    pass


class TimestampUnparsable(DataError):
    pass


class ParseThresholdExceeded(DataError):
    """More than the tolerated fraction of input lines were malformed."""


class EmptyCorpus(DataError):
    pass


class NoNegativeCandidates(DataError):
    """A user has visited every POI, so no negative target can be drawn."""


class InvalidFraction(DataError):
    pass


class DegenerateLabels(DataError):
    """AUC needs at least one positive and one negative label."""


class CompatibilityError(DisenPoiError):
    """Checkpoint / dataset / config disagree on shapes or counts."""


class ManifestMismatch(CompatibilityError):
    pass


class ShapeMismatch(CompatibilityError):
    pass


class NonFiniteValue(DisenPoiError):
    """A tensor picked up a NaN or Inf while checked mode was enabled."""


class NotScalar(DisenPoiError):
    """backward() was asked to differentiate a non-scalar value."""
