"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
ConvergenceError -> 4.
"""


class FlowcastError(Exception):
    """Base class for all flowcast errors."""


class ConfigError(FlowcastError):
    """Invalid or inconsistent configuration."""


class DataError(FlowcastError):
    """Malformed, missing, or dimensionally inconsistent input data."""


class ConvergenceError(FlowcastError):
    """An iterative solver violated its descent contract or failed to converge."""
