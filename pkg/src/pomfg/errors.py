"""Exception classes shared by every module."""


class PomfgError(Exception):
    exit_code = 1


class InvalidInput(PomfgError, ValueError):
    exit_code = 2


class ConfigError(PomfgError, ValueError):
    exit_code = 2


class DomainError(PomfgError, ValueError):
    exit_code = 3


class NumericalError(PomfgError, ArithmeticError):
    exit_code = 3


class FilterBlowup(NumericalError):
    exit_code = 4

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t:.6g})")
        self.t = t


class NonContractive(UserWarning):
    pass
