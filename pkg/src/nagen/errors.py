class DataError(ValueError):
    """Malformed or inconsistent gesture data."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
