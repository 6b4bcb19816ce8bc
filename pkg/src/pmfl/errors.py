"""Exception hierarchy shared by all subpackages."""


class PMFLError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PMFLError, ValueError):
    """Invalid configuration, shapes or bindings."""


class StateError(PMFLError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward before forward)."""


class ProtocolError(PMFLError, RuntimeError):
    """Federation messages do not fit the running scheme."""


class DataError(PMFLError, ValueError):
    """Dataset content is unusable."""


class ParseError(DataError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PartitionError(DataError):
    """Silo construction ran out of unassigned rows."""

    def __init__(self, message: str, column: str | None = None):
        self.column = column
        super().__init__(message)


class SplitError(DataError):
    """A stratified split is impossible for the given labels."""


class EvaluationError(PMFLError, ValueError):
    """Metric undefined for the given data (e.g. single-class AUC)."""
