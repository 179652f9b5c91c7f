"""Exception types shared across the package.

The CLI maps these onto stable exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4.
"""


class HfttcError(Exception):
    """Base class for package-specific failures."""


class ConfigError(HfttcError):
    """Invalid configuration, flags, thresholds, or scenario specs."""


class DataError(HfttcError):
    """Malformed or missing input data."""


class DivergenceError(HfttcError):
    """Training produced non-finite losses or gradients."""
