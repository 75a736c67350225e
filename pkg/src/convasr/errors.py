"""Exception hierarchy shared by all modules.

Every class carries an ``exit_code`` used by the command line front end so
that each error class maps to a distinct non-zero status.
"""


class ConvAsrError(Exception):
    exit_code = 1


class EmptyInput(ConvAsrError, ValueError):
    exit_code = 10


class UnknownSenone(ConvAsrError, KeyError):
    exit_code = 11


class IncompleteTransitionModel(ConvAsrError, ValueError):
    exit_code = 12


class NumericalOverflow(ConvAsrError, FloatingPointError):
    exit_code = 13


class LabelMismatch(ConvAsrError, ValueError):
    exit_code = 14


class ShapeError(ConvAsrError, ValueError):
    exit_code = 15


class InvalidConfig(ConvAsrError, ValueError):
    exit_code = 16


class TrainingDiverged(ConvAsrError, RuntimeError):
    exit_code = 17


class MissingFeature(ConvAsrError, KeyError):
    exit_code = 18

    def __init__(self, name):
        super().__init__(name)
        self.name = name


class UtteranceMismatch(ConvAsrError, ValueError):
    exit_code = 19


class DegenerateInput(ConvAsrError, ValueError):
    exit_code = 20


class EmptyReference(ConvAsrError, ValueError):
    exit_code = 21


class SyncError(ConvAsrError, RuntimeError):
    exit_code = 22


class IoError(ConvAsrError, OSError):
    exit_code = 23


class ManifestMismatch(ConvAsrError, RuntimeError):
    exit_code = 24


class StageError(ConvAsrError, RuntimeError):
    """Raised by the pipeline; wraps the failing stage's error."""

    exit_code = 25

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", StageError.exit_code)
