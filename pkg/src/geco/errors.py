"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: ConfigError -> 2,
CollectionFailureError -> 3, filesystem/OS errors -> 4.
"""


class GecoError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(GecoError):
    """Invalid or inconsistent experiment configuration."""


class ShapeError(GecoError):
    """Array or vector dimensions do not match the declared interface."""


class NumericError(GecoError):
    """Non-finite values where finite numbers are required."""


class InvalidExtrinsicsError(GecoError):
    """Camera rotation is not a proper orthonormal matrix."""


class FrameMismatchError(GecoError):
    """Point clouds in different coordinate frames were combined."""


class InvalidBoxError(GecoError):
    """Axis-aligned box with lo > hi in some component."""


class EmptyInputError(GecoError):
    """An operation that needs at least one point received none."""


class InsufficientPointsError(GecoError):
    """Fewer points available than a neighborhood query requires."""


class DegenerateGroupError(GecoError):
    """Local group too small for covariance analysis."""


class NotFoundError(GecoError):
    """Lookup of a sample or artifact that does not exist."""


class FreezeViolationError(GecoError):
    """Frozen base-policy parameters changed during adaptation."""


class CollectionFailureError(GecoError):
    """Correction collection could not gather enough successful trajectories."""


class UndefinedMetricError(GecoError):
    """Metric is undefined for the given inputs (e.g. zero diagonal entry)."""


class FileFormatError(GecoError):
    """On-disk artifact does not match its declared format."""
