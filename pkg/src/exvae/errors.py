"""Exception types shared across the package."""


class ExVAEError(Exception):
    """Base class for every error raised by this package."""


class FormatError(ExVAEError, ValueError):
    """A binary container has the wrong magic number or layout."""


class LengthError(ExVAEError, ValueError):
    """A payload is shorter or longer than its header declares."""


class ConsistencyError(ExVAEError, ValueError):
    """Paired inputs disagree, e.g. image and label counts."""


class DomainError(ExVAEError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ContractError(ExVAEError, ValueError):
    """Shapes, ranges or indices violate an operation's precondition."""


class NumericError(ExVAEError, FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""

    def __init__(self, message: str, block: str | None = None):
        super().__init__(message)
        self.block = block


class ConfigError(ExVAEError, ValueError):
    """A run configuration is missing a key or has an invalid one."""
