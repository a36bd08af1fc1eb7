"""Exception hierarchy.

Everything raised deliberately by the package derives from
:class:`BackdoorLabError`; the CLI maps :class:`ValidationError` subclasses
to exit code 2 and everything else to exit code 1.
"""


class BackdoorLabError(Exception):
    pass


class ValidationError(BackdoorLabError):
    """Bad input, configuration or file contents."""


class ParameterError(ValidationError, ValueError):
    pass


class SizeError(ParameterError):
    pass


class ShapeError(ParameterError):
    pass


class SchemaError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class CapacityError(ParameterError):
    """Not enough eligible samples to satisfy a request."""


class FormatError(ValidationError):
    """Unreadable, corrupt or version-mismatched file."""


class DatasetLoadError(BackdoorLabError):
    def __init__(self, message, path=None, row=None):
        super().__init__(message)
        self.path = path
        self.row = row


class DecodeError(DatasetLoadError):
    pass


class TriggerError(BackdoorLabError):
    def __init__(self, message, diagnostics: str = ""):
        super().__init__(message if not diagnostics else f"{message}\n{diagnostics}")
        self.diagnostics = diagnostics


class AdapterTimeoutError(TriggerError):
    pass


class BuildError(BackdoorLabError):
    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class TrainingError(BackdoorLabError):
    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class DivergenceError(TrainingError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class PredictionError(BackdoorLabError):
    pass


class DegenerateSetError(ParameterError):
    pass


class ContractViolation(ValidationError):
    pass


class MissingArtifactError(BackdoorLabError):
    """An upstream pipeline stage has not been run yet."""
