"""Exception types. ``exit_code`` is what the CLI returns when one escapes."""


class IstdError(Exception):
    exit_code = 1


class ConfigError(IstdError, ValueError):
    exit_code = 2


class DataError(IstdError):
    exit_code = 3


class NumericError(IstdError, ArithmeticError):
    exit_code = 4


class ShapeError(IstdError, ValueError):
    exit_code = 3


class StateError(IstdError, RuntimeError):
    exit_code = 1


class ProviderError(IstdError, RuntimeError):
    exit_code = 2
