"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class PoisonbenchError(Exception):
    """Base class for all package errors."""

    kind = "error"


class ConfigError(PoisonbenchError):
    """Invalid configuration: bad field values, unknown names, bad schema."""

    kind = "config_error"

    def __init__(self, message, kind=None):
        super().__init__(message)
        if kind is not None:
            self.kind = kind


class DataError(PoisonbenchError):
    """Invalid or inconsistent data: bad files, misaligned packs, shape clashes."""

    kind = "data_error"


class ShapeError(DataError):
    """Tensor shape mismatch, annotated with the offending layer or field."""

    kind = "shape_error"


class NumericError(PoisonbenchError):
    """Non-finite values where finite ones are required."""

    kind = "numeric_error"
