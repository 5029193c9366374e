"""Exception hierarchy shared by all augsal modules.

The CLI maps these onto process exit codes (see cli.py): ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""

from __future__ import annotations


class AugsalError(Exception):
    """Base class for all package errors."""


class ValidationError(AugsalError):
    """A domain type invariant was violated.

    ``invariant`` names the first violated invariant so callers and tests
    can distinguish failure modes without string matching on the message.
    """

    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


class TensorFormatError(AugsalError):
    """A tensor file could not be decoded.

    ``code`` is one of: "malformed_header", "dtype_mismatch",
    "shape_mismatch", "truncated_payload".
    """

    MALFORMED_HEADER = "malformed_header"
    DTYPE_MISMATCH = "dtype_mismatch"
    SHAPE_MISMATCH = "shape_mismatch"
    TRUNCATED_PAYLOAD = "truncated_payload"

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class ConfigError(AugsalError):
    """Run configuration is missing, malformed, or references bad paths."""


class DataError(AugsalError):
    """Dataset files are missing, malformed, or internally inconsistent."""


class NumericalError(AugsalError):
    """A numerical procedure failed (divergence, rank deficiency, ...)."""
