"""Exception hierarchy shared across the package."""


class VCIError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VCIError, ValueError):
    pass


class NumericError(VCIError, ArithmeticError):
    """A computation produced or received a non-finite value."""


class LevelError(VCIError, ValueError):
    """A covariate or treatment code lies outside the known levels."""


class StratumError(VCIError, KeyError):
    """Neither the requested stratum nor its treatment fallback exists."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing stratum"


class DomainError(VCIError, ValueError):
    """Inputs are well-formed but the quantity is undefined for them."""


class ConfigError(VCIError, ValueError):
    pass


class FormatError(VCIError, ValueError):
    """A file on disk does not match the expected layout."""


class ParseError(FormatError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
