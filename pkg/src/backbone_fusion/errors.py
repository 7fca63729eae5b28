"""Exception types shared across the package, mapped to CLI exit codes."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STORE = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    """Invalid or mutually inconsistent configuration / arguments."""


class StoreValidationError(ValueError):
    """An embedding store on disk or in memory violates the format contract."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values and cannot continue."""
