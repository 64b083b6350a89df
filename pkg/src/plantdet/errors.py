"""Exception hierarchy shared by every plantdet module.

The CLI maps these onto process exit codes, so raise the most specific class.
"""


class PlantDetError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class DimensionError(PlantDetError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ContractError(PlantDetError, ValueError):
    """A call violated a documented precondition."""


class ConfigError(PlantDetError, ValueError):
    exit_code = 2


class DataError(PlantDetError, ValueError):
    """Malformed or missing dataset content (labels, images, splits)."""

    exit_code = 3


class FormatError(DataError):
    """A checkpoint or binary file failed structural validation."""


class NumericError(PlantDetError, ArithmeticError):
    """A forward op produced NaN or Inf."""

    exit_code = 4
