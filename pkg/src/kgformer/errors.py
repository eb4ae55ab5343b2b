"""Exception hierarchy shared across the package.

CLI exit-code mapping: config/validation problems exit 2, runtime
divergence exits 3 (see cli.main).
"""


class KgformerError(Exception):
    """Base class for all package errors."""


class ShapeError(KgformerError):
    """Tensor shapes violate an operation's contract."""


class ConfigError(KgformerError):
    """Invalid configuration value or combination."""


class ContractError(KgformerError):
    """An operation precondition was violated at runtime."""


class GraphParseError(KgformerError):
    """Graph file could not be parsed; carries a 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(KgformerError):
    """Cross-artifact consistency check failed (graph vs dataset, etc.)."""


class LoadError(KgformerError):
    """Dataset file could not be loaded; carries a 1-based row number."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class DivergenceError(KgformerError):
    """Training produced a non-finite loss."""
