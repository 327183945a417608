"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so every error a user can hit
from the command line derives from one of the three roots below.
"""


class AmautError(Exception):
    """Base class for all package errors."""


class ConfigError(AmautError):
    """Invalid configuration or argument combination (exit code 2)."""


class DataError(AmautError):
    """Unreadable or malformed input data (exit code 3)."""


class NumericError(AmautError):
    """Non-finite values or divergence during optimisation (exit code 4)."""


class DecodeError(DataError):
    pass


class UnsupportedFormatError(DecodeError):
    pass


class ManifestError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class TooShortError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ShapeError(AmautError, ValueError):
    pass


class PlanError(ConfigError):
    pass


class CapacityError(ConfigError, ValueError):
    pass


class EnsembleError(ConfigError):
    pass


class NonFiniteGradientError(NumericError):
    pass


class DivergenceError(NumericError):
    pass


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return 1
