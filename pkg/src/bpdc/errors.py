"""Exception types raised across the package."""


class BPDCError(Exception):
    """Base class for all package errors."""


class DomainError(BPDCError, ValueError):
    """Argument outside the mathematical domain of a function."""


class ShapeError(BPDCError, ValueError):
    """Array dimensions do not agree."""


class StateError(BPDCError, RuntimeError):
    """Operation called on an object in the wrong state."""


class NumericError(BPDCError, ArithmeticError):
    """A non-finite value appeared during computation."""


class InvalidPriorError(BPDCError, ValueError):
    """Beta prior parameters are not both positive (requires gamma < K)."""


class FormatError(BPDCError, ValueError):
    """A file does not follow the expected binary or text layout."""


class IncompatibleVersionError(FormatError):
    """Checkpoint was written by an unsupported format version."""


class RefusalError(BPDCError, ValueError):
    """Request is too large to be served (e.g. exhaustive search over too many bits)."""


class ConfigError(BPDCError, ValueError):
    """Invalid run configuration."""
