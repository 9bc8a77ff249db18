"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so keep the split coarse:
configuration problems, data/file problems, and numeric failures.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(ValueError):
    """Malformed dataset file or unachievable split regime."""


class NumericError(RuntimeError):
    """Non-finite value produced where the contract forbids it."""
