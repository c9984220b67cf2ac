"""Exception hierarchy shared across the package."""


class TextGailError(Exception):
    """Base class for all package errors."""


class ConfigError(TextGailError, ValueError):
    pass


class EmptyCorpus(TextGailError, ValueError):
    pass


class ParseError(TextGailError, ValueError):
    def __init__(self, line: int, message: str = "malformed record"):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(TextGailError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ShapeError(TextGailError, ValueError):
    pass


class LengthError(TextGailError, ValueError):
    pass


class NumericsError(TextGailError, ArithmeticError):
    pass


class InsufficientData(TextGailError, ValueError):
    pass


class EmptyInput(TextGailError, ValueError):
    pass


class TrainingAborted(NumericsError):
    """Raised after repeated consecutive numerical failures."""
