"""Exception taxonomy shared across the package.

The CLI maps these onto exit statuses: configuration problems exit with 2,
data or environment failures during a run exit with 3.
"""


class ConfigurationError(ValueError):
    """Invalid parameter values or an invalid experiment specification."""


class DataError(ValueError):
    """Malformed or insufficient input data.

    Carries the 1-based line number of the offending record when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SimulationError(RuntimeError):
    """The environment reached a state a run cannot proceed from."""


class ExpertError(RuntimeError):
    """An expert failed to produce recommendations."""
