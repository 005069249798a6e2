"""Exception hierarchy.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
bad input data exits 2, runtime or numeric failures exit 3.
"""


class IcnerError(Exception):
    """Base class for all package errors."""


class ConfigurationError(IcnerError):
    """Invalid configuration or unusable parameter combination."""


class DataError(IcnerError):
    """Input data is malformed or violates an invariant."""


class CorpusParseError(DataError):
    """A corpus file could not be parsed; carries the offending line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class ValidationError(DataError):
    """An instance failed span validation."""


class SamplingError(DataError):
    """The corpus cannot support the requested task shape."""


class EpisodeError(DataError):
    """A k-shot episode cannot be built from the given splits."""


class EvaluationError(DataError):
    """Prediction/gold inputs to the scorer are inconsistent."""


class RuntimeFailure(IcnerError):
    """Numeric or internal runtime failure."""


class AlignmentError(RuntimeFailure):
    """Instruction/text token rows failed to align between the two encoders."""


class TruncationError(RuntimeFailure):
    """An input exceeds the model's maximum length; nothing is silently cut."""


class TrainingDivergedError(RuntimeFailure):
    """A non-finite loss was encountered; carries a diagnostic snapshot."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
