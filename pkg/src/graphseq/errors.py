"""Shared exception types, mapped to CLI exit codes."""


class ConfigError(Exception):
    """Invalid or unknown configuration (exit code 2)."""


class DataError(Exception):
    """Malformed or inconsistent input data (exit code 3)."""


class NumericError(Exception):
    """Non-finite value encountered during computation (exit code 4)."""
