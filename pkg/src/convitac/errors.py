"""Exception hierarchy shared by every convitac module."""


class ConViTacError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ConViTacError, ValueError):
    """Operand shapes are incompatible."""


class ValidationError(ConViTacError, ValueError):
    """An argument or data item violates a documented precondition."""


class ContractError(ConViTacError, RuntimeError):
    """An API is used out of order or against its contract."""


class FormatError(ConViTacError, ValueError):
    """A serialized file is malformed."""


class LoadError(ConViTacError, OSError):
    """A referenced file could not be read."""


class DegenerateInputError(ValidationError):
    """Input carries no usable information (e.g. zero variance)."""
