class IFDError(Exception):
    """Base class for errors raised by ifdreid."""


class LoadError(IFDError):
    pass


class ValidationError(IFDError, ValueError):
    pass


class ProtocolError(IFDError):
    pass


class ConfigError(IFDError, ValueError):
    pass


class NumericError(IFDError, ArithmeticError):
    pass
