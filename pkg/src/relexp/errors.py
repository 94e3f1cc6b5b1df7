"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, data errors
(ParseError, SchemaViolation, NotFound, InsufficientData,
InsufficientClassMembers) -> 3, runtime failures (DomainError,
ImpossiblePerturbation, SpaceTooLarge, anything else) -> 4.
"""


class RelexpError(Exception):
    """Base class for all package errors."""


class ConfigError(RelexpError):
    """Invalid configuration file or option combination."""


class ParseError(RelexpError):
    """Malformed schema descriptor or CSV input."""


class SchemaViolation(RelexpError):
    """Data violates key or foreign-key constraints."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NotFound(RelexpError):
    """Unknown relation, attribute, or foreign key."""


class DomainError(RelexpError):
    """Argument outside its contract (mask range, bad instance, ...)."""


class InsufficientData(RelexpError):
    """Too few labeled instances to train."""


class InsufficientClassMembers(RelexpError):
    """Balanced sampling requested more per-class instances than exist."""


class ImpossiblePerturbation(RelexpError):
    """No valid contingency database exists for the request."""


class SpaceTooLarge(RelexpError):
    """Exhaustive enumeration would exceed the guarded candidate budget."""
