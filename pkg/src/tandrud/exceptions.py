"""Exception types shared across the package."""


class TanDrudError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TanDrudError, ValueError):
    pass


class ContractError(TanDrudError, ValueError):
    """A precondition of an operation was violated by the caller."""


class EmptySupportError(ContractError):
    pass


class NonFiniteError(TanDrudError, FloatingPointError):
    pass


class ParseError(TanDrudError, ValueError):
    def __init__(self, message, path=None, lineno=None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where = f"{path}:"
        if lineno is not None:
            where += f"{lineno}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ConfigError(TanDrudError, ValueError):
    pass


class CheckpointError(TanDrudError, ValueError):
    pass
