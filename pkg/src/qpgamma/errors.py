class QPGammaError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(QPGammaError, ValueError):
    exit_code = 2


class DataError(QPGammaError, ValueError):
    """Missing, malformed or inconsistent input data."""

    exit_code = 3


class NumericalError(QPGammaError, RuntimeError):
    """Solver non-convergence, degenerate fits, undefined estimates."""

    exit_code = 4
