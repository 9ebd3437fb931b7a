"""Exception classes shared across the package.

The CLI maps these onto exit codes: DataError -> 3, NumericError -> 4
(usage errors exit 2 via argparse).
"""


class DataError(Exception):
    """Malformed or inconsistent input data (CSV rows, schemas, model files)."""


class ConfigError(DataError):
    """Invalid configuration value or unknown config key."""


class NumericError(Exception):
    """Non-finite value where a finite one is required (divergence, bad weights)."""
