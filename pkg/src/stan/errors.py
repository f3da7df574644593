"""Exception types shared across the package."""


class StanError(Exception):
    """Base class for all package errors."""


class DimensionError(StanError):
    """Operand shapes are incompatible."""


class ContractError(StanError):
    """A documented precondition was violated."""


class NotFoundError(StanError, KeyError):
    """A requested record does not exist."""


class SequenceLengthError(StanError):
    """A token sequence exceeds the positional table."""
