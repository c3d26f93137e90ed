"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code category (see cli.EXIT_CODES).
"""


class ColdRecError(Exception):
    """Base class for all package errors."""


class ConfigError(ColdRecError):
    """Invalid or inconsistent run configuration. Carries all violations."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(ColdRecError):
    """Malformed input data, empty datasets, or invalid splits."""


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class EmptyDatasetError(DataError):
    pass


class DimensionError(ColdRecError):
    """Shape mismatch between operands; message names both shapes."""


class NumericError(ColdRecError):
    """NaN/Inf detected in a tensor, or other numeric breakdown."""


class UndefinedCorrelationError(NumericError):
    """Rank correlation requested on a zero-variance vector."""


class StagingError(ColdRecError):
    """Training stage invoked before its prerequisites completed."""


class FormatError(ColdRecError):
    """Checkpoint file is corrupt, truncated, or has wrong magic/version."""
