"""Exception types shared across the package."""


class XbartestError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(XbartestError, ValueError):
    """Operand shapes do not conform."""


class ModelFormatError(XbartestError, ValueError):
    """Model manifest or weight blob is malformed."""


class NumericError(XbartestError, ArithmeticError):
    """A computation produced non-finite values."""
