"""Exception hierarchy shared across the package."""


class ShalrtError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ShalrtError, ValueError):
    pass


class DimensionError(ShalrtError, ValueError):
    pass


class LabelError(ShalrtError, ValueError):
    pass


class LabelSchemaError(LabelError):
    """A label set or corpus disagrees with the expected IOB schema."""


class ParseError(ShalrtError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ContractError(ShalrtError, ValueError):
    pass


class AlignmentError(ContractError):
    """Keys and values handed to an attention call have different lengths."""


class TrainingError(ShalrtError, RuntimeError):
    pass


class NumericalError(TrainingError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message)


class CheckpointError(ShalrtError, OSError):
    """A checkpoint file is unreadable or not in the expected format."""
