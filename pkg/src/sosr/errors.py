"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised for malformed config files, recipes, or CLI arguments."""


class NumericError(RuntimeError):
    """Raised when training produces a non-finite loss.

    Carries the metrics of every epoch that completed before the failure so
    callers can still persist a valid, truncated metrics file.
    """

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = list(metrics) if metrics is not None else []
