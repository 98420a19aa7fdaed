"""Exception hierarchy shared across the package."""


class MacsSwinError(Exception):
    """Base class for all package errors."""


class ShapeError(MacsSwinError, ValueError):
    pass


class DTypeError(MacsSwinError, TypeError):
    pass


class ParameterError(MacsSwinError, ValueError):
    """A numeric argument is outside its admissible range."""


class ConfigError(MacsSwinError, ValueError):
    pass


class ContractError(MacsSwinError, RuntimeError):
    """An API precondition about call order or state was violated."""


class ValidationError(MacsSwinError, ValueError):
    pass


class FormatError(MacsSwinError, ValueError):
    """A file on disk does not follow the expected layout."""


class ManifestParseError(FormatError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class TrainingError(MacsSwinError, RuntimeError):
    """Numerical failure during optimisation (NaN loss or gradients)."""


class ImageReadError(MacsSwinError, OSError):
    def __init__(self, path, reason=""):
        super().__init__(f"cannot read image {path}" + (f": {reason}" if reason else ""))
        self.path = path
