"""Exception types shared across the package."""


class CrsnError(Exception):
    """Base class for all package errors."""


class ShapeError(CrsnError, ValueError):
    pass


class NumericError(CrsnError, ArithmeticError):
    pass


class DegenerateInputError(CrsnError, ValueError):
    pass


class RangeError(CrsnError, ValueError):
    pass


class ConfigError(CrsnError, ValueError):
    pass


class SchemaError(CrsnError, ValueError):
    pass


class ParseError(CrsnError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class ContractError(CrsnError, RuntimeError):
    pass


class MeasurementError(CrsnError, RuntimeError):
    pass
