"""Exception taxonomy shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class SegstackError(Exception):
    """Base class for all package errors."""


class ConfigError(SegstackError):
    """Invalid configuration, hyperparameters, or call arguments."""


class DataError(SegstackError):
    """Broken, inconsistent, or missing input data."""


class NumericalError(SegstackError):
    """A numerical routine failed beyond recoverable tolerances."""


class ProbMapFormatError(DataError):
    """Malformed probability-map file."""


class BadMagicError(ProbMapFormatError):
    """File does not start with the expected magic bytes."""


class DimensionOverflowError(ProbMapFormatError):
    """Header dimensions are zero or imply an implausibly large payload."""


class TruncatedPayloadError(ProbMapFormatError):
    """File ends before the declared payload is complete."""


class MapValidationError(DataError):
    """Probability-map contents violate value-range or normalization bounds."""
