"""Exception hierarchy shared by every module."""


class MonoKPError(Exception):
    """Base class for all library errors."""


class GeometryError(MonoKPError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class InsufficientConstraints(GeometryError):
    pass


class DegenerateSystem(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


class NoConvergence(GeometryError):
    """Raised by the Gauss-Newton oracle; carries the last iterate."""

    def __init__(self, message, position=None, residual=None):
        super().__init__(message)
        self.position = position
        self.residual = residual


class InvalidScale(MonoKPError):
    pass


class ShapeMismatch(MonoKPError):
    pass


class FrustumExhausted(MonoKPError):
    pass


class FormatError(MonoKPError):
    """Parse error with a 1-based line and column (column may be None)."""

    def __init__(self, message, line=None, column=None, path=None):
        self.message = message
        self.line = line
        self.column = column
        self.path = path
        where = f"{path}: " if path is not None else ""
        if line is not None:
            where += f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)

    def with_path(self, path) -> "FormatError":
        """Same error, same type, naming the offending file."""
        return type(self)(self.message, self.line, self.column, path)


class MissingKey(FormatError):
    pass


class MalformedNumber(FormatError):
    pass


class FieldCount(FormatError):
    pass


class InvalidField(FormatError):
    pass


class HeadMapsFormatError(FormatError):
    pass
