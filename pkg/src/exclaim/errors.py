"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class ExclaimError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ExclaimError):
    """Invalid configuration, hyperparameter, or command usage."""


class DataError(ExclaimError):
    """Malformed or inconsistent input data (corpus, store, checkpoint, pairing)."""


class NumericalError(ExclaimError):
    """Non-finite values encountered during optimization or inference."""
