"""Exception types shared across the package.

The CLI maps these onto process exit codes (see cli.py): configuration
problems exit 1, malformed or missing input data exits 2, numeric
failures exit 3.
"""


class ConfigError(Exception):
    """Bad run configuration: unknown keys, invalid values, missing files."""


class DataFormatError(Exception):
    """Malformed on-disk data: PGM/CSV/model files, sequence layout."""


class NumericError(Exception):
    """Numerically invalid state: non-finite values, degenerate training sets."""
