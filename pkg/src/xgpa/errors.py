"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid layer, model or run configuration."""


class ContractError(ValueError):
    """A call violated an operation's preconditions."""


class FormatError(ValueError):
    """A file does not follow the expected layout."""


class IntegrityError(FormatError):
    """A checkpoint failed its checksum or ended early."""


class IngestionError(ValueError):
    """Speeds and graph files disagree with each other."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step
