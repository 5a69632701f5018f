"""Error types raised by the toolkit.

Every failure mode has a dedicated class so callers (and tests) can
distinguish shape bugs from data problems from API misuse without
parsing messages.
"""


class DimensionError(ValueError):
    """Operand or feature shapes are incompatible."""


class InvalidValueError(ValueError):
    """NaN or infinity where a finite value is required."""


class ContractError(ValueError):
    """An API contract was violated (non-scalar loss, missing gradient, bad targets)."""


class MissingNodeError(RuntimeError):
    """A tensor was not recorded on the active tape."""


class GraphError(RuntimeError):
    """Tape misuse, e.g. activating a tape while another is active."""


class ConfigurationError(ValueError):
    """A configuration value is out of its legal range."""


class IntegrityError(ValueError):
    """A corpus violates a cross-record consistency rule."""


class ParseError(ValueError):
    """A corpus file line could not be parsed."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class RangeError(ValueError):
    """A field value lies outside its documented range."""


class DegenerateInputError(ValueError):
    """Input is degenerate for the requested computation (e.g. a zero-norm token row)."""


class RoutingError(ValueError):
    """A record's language tag has no parameter route."""


class UsageError(RuntimeError):
    """A stateful object was used out of order (e.g. refitting a fitted normalizer)."""
