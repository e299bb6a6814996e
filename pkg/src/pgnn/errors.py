"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class ConfigError(ValueError):
    """Invalid experiment or solver configuration."""


class DataError(ValueError):
    """Malformed input files or an invalid graph."""


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class NumericalError(ArithmeticError):
    """A non-finite value or a guarded singularity was hit."""
