"""Exception hierarchy shared across the package."""


class HybridMapError(Exception):
    """Base class for all errors raised by hybridmap."""


class InputError(HybridMapError):
    """Caller passed arguments outside an operation's domain."""


class QueryError(InputError):
    """A spatial query fell outside the allocated voxels or the encoding domain."""


class FormatError(InputError):
    """A file on disk does not match the expected layout."""


class LoadError(FormatError):
    """A file is missing or cannot be decoded."""


class NumericalError(HybridMapError):
    """A non-finite value appeared in losses or gradients."""


class UsageError(HybridMapError):
    """An object was used in an invalid state (e.g. a consumed tape)."""
