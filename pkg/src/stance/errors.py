"""Exception hierarchy; each class maps to a CLI exit code."""


class StanceError(Exception):
    exit_code = 1


class ConfigError(StanceError, ValueError):
    exit_code = 2


class DataError(StanceError, ValueError):
    exit_code = 3


class DegenerateError(StanceError, ArithmeticError):
    exit_code = 4
