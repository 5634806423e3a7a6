"""Exception types shared across the package."""


class FadeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FadeError, ValueError):
    """Invalid configuration value.

    ``field`` names the offending setting (a dotted name or JSON pointer)
    so callers can report it without parsing the message.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(FadeError, ValueError):
    """Malformed or insufficient input data."""


class ShapeError(FadeError, ValueError):
    """Arrays with incompatible dimensions were combined."""


class SequencingError(FadeError, RuntimeError):
    """Batches were delivered out of order."""
