"""Exception taxonomy shared by every module.

Grouping matters for the CLI: I/O problems, malformed files, and bad
configuration map to distinct exit codes, so they need distinct bases.
"""


class ZippyError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ZippyError, ValueError):
    """Input data violates a precondition (non-finite, out of range, too small)."""


class InvalidParameterError(ZippyError, ValueError):
    """A parameter value is outside its documented domain."""


class DimensionError(ZippyError, ValueError):
    """Operand shapes are inconsistent with each other or with the operation."""


class ConfigurationError(ZippyError, ValueError):
    """A network or search configuration is structurally invalid."""


class EstimationError(ZippyError, RuntimeError):
    """Model fitting failed (degenerate sample, no consensus)."""


class ConvergenceError(ZippyError, RuntimeError):
    """An iterative solver ran out of iterations before reaching tolerance."""


class SearchAborted(ZippyError, RuntimeError):
    """A configuration search died mid-way; partial_trace holds progress."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.partial_trace = trace


class FormatError(ZippyError, ValueError):
    """A serialized file does not conform to its documented layout."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    """File version is newer than this reader understands."""


class ChecksumError(FormatError):
    """A record checksum does not match its payload."""


class TruncatedFileError(FormatError):
    """File ended before a complete record could be read."""
