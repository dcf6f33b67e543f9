"""Exception types shared across the package.

Each carries the process exit code the CLI maps it to.
"""


class CausalVEError(Exception):
    exit_code = 1


class ValidationError(CausalVEError, ValueError):
    exit_code = 2


class FormatError(ValidationError):
    """Malformed file or directory layout."""


class NumericError(CausalVEError, ArithmeticError):
    exit_code = 3


class KeyMismatch(CausalVEError):
    """Recovery attempted with a key that does not match the package."""

    exit_code = 4


class StageError(CausalVEError):
    """Wraps a failure inside one pipeline stage, tagging the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
