"""Exception types raised across the package."""


class SplatError(Exception):
    """Base class for all package errors."""


class ArgumentError(SplatError, ValueError):
    """An argument is outside the domain an operation accepts."""


class ContractViolation(SplatError, RuntimeError):
    """A precondition that the caller is responsible for was broken."""


class DegenerateRotationError(ArgumentError):
    pass


class DegenerateDepthError(SplatError):
    """The depth correlation is undefined (fewer than 2 pixels or zero variance)."""


class DegeneratePatchError(ArgumentError):
    pass


class NumericalFailure(SplatError, FloatingPointError):
    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term


class ParseError(SplatError, ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class UnsupportedModelError(SplatError, ValueError):
    pass


class ConfigError(SplatError, ValueError):
    pass
