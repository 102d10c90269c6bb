"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 1, DataError -> 2,
TrainingDivergedError -> 3.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed data: bad corpus file, out-of-range label, ..."""


class ShapeError(ValueError):
    """Dimension mismatch between arrays or network layers."""


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
