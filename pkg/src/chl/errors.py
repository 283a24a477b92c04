"""Exception types; the CLI maps each to a process exit code."""


class ChlError(Exception):
    exit_code = 1


class ConfigError(ChlError, ValueError):
    exit_code = 2


class DataError(ChlError, ValueError):
    exit_code = 3


class NumericalError(ChlError, ArithmeticError):
    exit_code = 4
