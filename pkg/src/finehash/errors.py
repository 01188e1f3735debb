"""Shared exception types for the finehash package."""


class FineHashError(Exception):
    """Base class for all finehash-specific errors."""


class DimensionError(FineHashError):
    """Operand shapes or extents violate an operation's contract."""


class DomainError(FineHashError):
    """Input values fall outside an operation's numeric domain."""


class ContractError(FineHashError):
    """A documented precondition was violated by the caller."""


class NumericError(FineHashError):
    """A computation produced NaN or Inf, or otherwise left the finite range."""


class IngestionError(FineHashError):
    """A dataset file (manifest or image) could not be parsed."""


class FileFormatError(FineHashError):
    """A binary artifact file is malformed or truncated."""


class ConfigError(FineHashError):
    """A run configuration file or flag combination is invalid."""
