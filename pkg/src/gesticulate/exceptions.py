"""Exception types surfaced to the CLI as single-line errors."""


class GesticulateError(Exception):
    """Base class for domain errors raised by this package."""


class BvhParseError(GesticulateError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(GesticulateError):
    """Bad or unknown configuration key/value."""


class FormatError(GesticulateError):
    """Model or file archive with the wrong format tag or version."""
