"""Shared error types with CLI exit-code mapping."""


class ConfigError(ValueError):
    """Invalid or malformed run configuration (exit code 2)."""


class MissingPrerequisiteError(FileNotFoundError):
    """A required dataset or checkpoint artifact is absent (exit code 3)."""


class DivergenceError(RuntimeError):
    """Training produced non-finite values (exit code 4)."""
