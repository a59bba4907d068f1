"""Shared exception types, mapped to CLI exit codes in cli.py."""


class ConfigError(ValueError):
    """Bad usage, unknown config keys, invalid presets. Exit code 1."""


class NumericalError(RuntimeError):
    """NaN/Inf losses or activations, failed convergence. Exit code 2."""
