"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries its own.
"""


class Text2SongError(Exception):
    exit_code = 3


class ValidationError(Text2SongError, ValueError):
    """Input data violates a documented contract."""

    exit_code = 1


class ConfigurationError(Text2SongError):
    """Models, configs or files do not fit together."""

    exit_code = 1


class CapacityError(ValidationError):
    """A sequence exceeds what the model was built for."""


class MissingPrerequisiteError(Text2SongError):
    """An upstream artifact (checkpoint, corpus) is not available."""

    exit_code = 2


class TrainingDivergedError(Text2SongError):
    """Training produced a non-finite loss."""

    exit_code = 3


class StageError(Text2SongError):
    """Wraps a failure inside one pipeline stage with its name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)
