"""Exception hierarchy for the Causal-ACT tooling.

Every error carries the process exit code the CLI maps it to.
"""


class CausalActError(ValueError):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(CausalActError):
    """Invalid configuration or command usage."""

    exit_code = 1


class DataError(CausalActError):
    """Invalid, inconsistent or unreadable data (datasets, graphs, checkpoints)."""

    exit_code = 2


class NumericError(CausalActError):
    """Numerical failure: non-finite losses, singular systems."""

    exit_code = 3


__all__ = ["CausalActError", "ConfigError", "DataError", "NumericError"]
