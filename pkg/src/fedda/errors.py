"""Exception hierarchy shared by all fedda modules."""


class FeddaError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(FeddaError, ValueError):
    pass


class DimensionMismatch(FeddaError, ValueError):
    pass


class BatchEmpty(FeddaError, ValueError):
    pass


class BatchTooLarge(FeddaError, ValueError):
    pass


class TooManyClients(InvalidArgument):
    pass


class InvalidIterationCount(InvalidArgument):
    pass


class EmptyReportSet(FeddaError, ValueError):
    pass


class DegenerateBeta(FeddaError, ValueError):
    pass


class NotQuadratic(FeddaError, TypeError):
    pass


class NonpositiveValueInWindow(FeddaError, ValueError):
    pass


class WindowTooSmall(FeddaError, ValueError):
    pass


class NonFiniteState(FeddaError, FloatingPointError):
    """Raised when an update produces NaN or Inf parameters."""


class ParseError(FeddaError, ValueError):
    """Malformed tabular input. ``line`` and ``column`` are 1-based."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)


class EmptyInput(ParseError):
    def __init__(self, message: str = "EmptyInput: no data rows"):
        super().__init__(message)


class ConfigError(FeddaError, ValueError):
    """Invalid experiment configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")
