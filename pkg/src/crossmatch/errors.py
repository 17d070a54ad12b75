"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CrossMatchError(Exception):
    exit_code = 1


class ConfigError(CrossMatchError, ValueError):
    exit_code = 2


class DataError(CrossMatchError, ValueError):
    exit_code = 3


class NumericError(CrossMatchError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})


class InternalError(CrossMatchError, RuntimeError):
    pass
