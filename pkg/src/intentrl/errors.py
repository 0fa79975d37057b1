"""Exception types shared across the package."""


class IntentRlError(Exception):
    """Base class for all package errors."""


class ConfigError(IntentRlError):
    """Invalid configuration value or combination (maps to CLI exit code 1)."""


class UsageError(IntentRlError):
    """API misuse, e.g. stepping a finished episode."""


class ShapeError(IntentRlError):
    """Array dimension mismatch."""


class NumericError(IntentRlError):
    """Non-finite loss or parameter encountered during training."""


class SamplingError(IntentRlError):
    """Sampling requested from an empty or unusable data source."""


class CollectionError(IntentRlError):
    """Data collection cannot proceed, e.g. unreachable goal for the expert."""


class DatasetParseError(IntentRlError):
    """Malformed dataset file; carries the 1-based offending line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class VersionError(IntentRlError):
    """File or checkpoint version/architecture mismatch."""


class ValidationError(ConfigError):
    """Experiment config failed validation; carries all violations at once."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config:\n" + "\n".join(f"  - {v}" for v in self.violations))
