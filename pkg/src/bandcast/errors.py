"""Exception types shared across the package."""


class BandcastError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(BandcastError):
    """A data file does not have the expected columns or value types."""


class DuplicateKeyError(SchemaError):
    """The same (day, hour) key appears more than once in an input file."""


class ConfigError(BandcastError):
    """A configuration value is missing, malformed, or out of range."""


class InsufficientHistoryError(BandcastError):
    """Not enough past observations to honor a requested window.

    Carries the requested and available sizes so callers can report
    exactly what was missing.
    """

    def __init__(self, required: int, available: int, what: str = "observations"):
        self.required = int(required)
        self.available = int(available)
        super().__init__(
            f"need {required} {what} but only {available} are available"
        )


class ProtocolError(BandcastError):
    """An online predict/update sequence was violated.

    Raised when truths arrive out of order, an update is applied before a
    prediction was issued, or a prediction is requested twice for the
    same step.
    """


class NotFittedError(BandcastError):
    """A model was used for prediction before being fitted."""
