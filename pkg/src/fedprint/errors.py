"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class
matters: configuration problems must not be reported as data problems.
"""


class FedprintError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedprintError):
    """A config value, profile, or scenario parameter is invalid."""


class InvalidInputError(FedprintError, ValueError):
    """An operation received data that violates its preconditions."""


class DatasetFormatError(FedprintError):
    """A dataset file could not be parsed.

    ``line`` carries the 1-based line number of the offending row when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class AggregationError(FedprintError):
    """An aggregation step failed (shape mismatch, empty survivor set, ...)."""
