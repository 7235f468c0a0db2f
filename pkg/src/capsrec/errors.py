"""Exception taxonomy shared across the package.

ConfigError maps to CLI exit code 1, everything else raised at runtime
maps to exit code 2.
"""


class CapsrecError(Exception):
    """Base class for all package errors."""


class ConfigError(CapsrecError):
    """Invalid configuration value, file, or command-line usage."""


class DimensionError(CapsrecError):
    """Shape-incompatible operands; the message names both shapes."""


class DomainError(CapsrecError):
    """Input outside an operation's mathematical domain (empty vector, single-class AUC, ...)."""


class NumericalError(CapsrecError):
    """Non-finite value produced where finiteness is required."""


class SequencingError(CapsrecError):
    """Pipeline steps invoked out of order (e.g. optimizer step before gradient mixing)."""


class MaskingViolationError(CapsrecError):
    """The positive item leaked into the sampled negatives of the interest loss."""


class DataFormatError(CapsrecError):
    """Malformed input data beyond the tolerated error budget."""
