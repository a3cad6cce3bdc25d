"""Exception hierarchy.

``ValidationError`` covers caller contract violations (bad shapes, bad
indices, bad configuration). ``FormatError`` and friends cover corrupted or
inconsistent files on disk.
"""


class PromptAdapterError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PromptAdapterError, ValueError):
    pass


class ConfigError(ValidationError):
    """Bad user configuration (unknown keys, invalid values, bad flags)."""


class ZeroNorm(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class KindMismatch(ValidationError):
    pass


class NonFinite(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


class LengthMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class NotLearnable(ValidationError):
    pass


class EmptySplit(ValidationError):
    pass


class SequenceTooLong(ValidationError):
    pass


class TokenOutOfVocab(ValidationError):
    pass


class ShotCountMismatch(ValidationError):
    pass


class UnnormalizedFeature(ValidationError):
    pass


class InsufficientShots(ValidationError):
    def __init__(self, class_id: int, available: int, requested: int):
        self.class_id = class_id
        self.available = available
        self.requested = requested
        super().__init__(
            f"class {class_id} has {available} train rows, {requested} shots requested"
        )


class EmptyGrid(ValidationError):
    pass


class EmptyTaskList(ValidationError):
    pass


class IncompatibleEncoder(ValidationError):
    pass


class RejectionBudgetExceeded(PromptAdapterError):
    pass


class FormatError(PromptAdapterError):
    pass


class ChecksumMismatch(FormatError):
    pass


class ManifestMismatch(FormatError):
    pass


class ConfigHashWarning(UserWarning):
    """A file was produced under a different experiment configuration."""
