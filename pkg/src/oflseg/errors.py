"""Exception hierarchy shared across the package."""


class OflError(Exception):
    """Base class for all package errors."""


class ShapeError(OflError, ValueError):
    pass


class ValidationError(OflError, ValueError):
    pass


class ConfigError(OflError, ValueError):
    pass


class StateError(OflError, RuntimeError):
    pass


class FormatError(OflError, ValueError):
    """Malformed tensor file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
