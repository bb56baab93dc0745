"""Exception hierarchy.

Validation errors (bad inputs, configs, schemas) map to CLI exit code 1;
everything else derived from :class:`FinoError` maps to exit code 2.
"""


class FinoError(Exception):
    """Base class for all package errors."""


class ValidationError(FinoError):
    """Input or configuration failed validation."""


class SchemaViolation(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ConfigMismatch(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class MissingModality(FinoError):
    pass


class CorruptEpisode(FinoError):
    pass


class InsufficientFrames(FinoError):
    pass


class DegeneratePhase(FinoError):
    pass


class NumericalError(FinoError):
    pass


class EmptyAudio(FinoError):
    pass


class ShapeError(FinoError):
    pass


class TrainingDiverged(FinoError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class IoError(FinoError, OSError):
    pass
