"""
Exception hierarchy for knnadapt.

Every error the CLI can surface carries the process exit code it maps to:
2 for usage/configuration problems, 3 for bad input data or files,
4 for numeric failures during training.
"""

from pathlib import Path


class KnnAdaptError(Exception):
    """Base class for all knnadapt errors."""

    exit_code = 1


class UsageError(KnnAdaptError):
    exit_code = 2


class ConfigError(UsageError):
    """Invalid or inconsistent configuration (missing keys, bad ranges, missing artifacts)."""


class DataError(KnnAdaptError):
    exit_code = 3


class InvalidSpecError(DataError):
    """A DomainSpec that cannot generate data."""


class CorpusParseError(DataError):
    def __init__(self, path: str | Path, line_number: int, message: str):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{self.path}:{line_number}: {message}")


class FormatError(DataError):
    """Binary artifact with the wrong magic/version, or truncated."""

    def __init__(self, path: str | Path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path} @ byte {offset}: {message}")


class NumericError(KnnAdaptError):
    exit_code = 4


class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class DimensionError(ContractError):
    pass


class LengthError(ContractError):
    pass


class StageError(KnnAdaptError):
    """Failure inside one stage of an experiment run."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code_for(cause)
        super().__init__(f"stage '{stage}' failed: {cause}")


def exit_code_for(error: BaseException) -> int:
    """Exit code for any error: its own code, 2 for bad values or missing files, else 1."""
    if isinstance(error, KnnAdaptError):
        return error.exit_code
    if isinstance(error, ValueError | FileNotFoundError):
        return 2
    return 1
