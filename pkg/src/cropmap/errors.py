"""Exception hierarchy shared by the library and the CLI.

CLI exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""


class CropmapError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(CropmapError):
    """Invalid or inconsistent configuration (bad keys, unresolvable paths)."""

    exit_code = 2


class DataError(CropmapError):
    """Bad input data: missing files, unsupported containers, misaligned rasters."""

    exit_code = 3


class NumericError(CropmapError):
    """Numeric failure during optimization or estimation (non-finite loss, ...)."""

    exit_code = 4
