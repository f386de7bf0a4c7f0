"""Exception hierarchy for the evident package.

Every failure mode the library promises to report has a dedicated type so
callers (and the CLI exit-code mapping) can distinguish bad arguments from
numeric breakdowns, degenerate geometry, file-format damage, and training
divergence.
"""


class EvidentError(Exception):
    """Base class for all evident-specific errors."""


class InvalidInputError(EvidentError, ValueError):
    """Arguments violate a documented precondition (non-finite, wrong range)."""


class DomainError(EvidentError, ValueError):
    """Quantity is undefined for the given parameters (e.g. moments for low dof)."""


class UsageError(EvidentError, ValueError):
    """API misuse: shape mismatch, unknown mode, invalid configuration."""


class NumericError(EvidentError, ArithmeticError):
    """Numerical failure: non-SPD matrix, non-finite intermediate values."""


class DegenerateGeometryError(EvidentError):
    """Point configuration too degenerate for a similarity fit."""


class EmptyInputError(EvidentError):
    """An operation received no valid pixels/points."""


class UndefinedMetricError(EvidentError):
    """Metric undefined for this input (constant ranks, single-class labels)."""


class UnsupportedLikelihoodError(EvidentError):
    """NLL requested for a source that defines no predictive likelihood."""


class DegenerateVarianceError(EvidentError):
    """Moment matching cannot produce a usable variance estimate."""


class FormatError(EvidentError):
    """A binary file or manifest failed validation."""

    def __init__(self, message, *, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(FormatError):
    """Dataset manifest inconsistent with the files on disk."""


class TrainingError(EvidentError):
    """Training diverged; carries the epoch index where it happened."""

    def __init__(self, message, *, epoch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch
