"""Exception types shared across vprkit modules."""


class VprkitError(Exception):
    """Base class for all vprkit errors."""


class ManifestError(VprkitError):
    """A manifest file failed to parse or validate.

    Carries the 1-based line number when the problem is tied to a row.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ZeroNormError(VprkitError):
    """A vector that must be normalized has (near-)zero norm."""


class SamplerError(VprkitError):
    """The database cannot satisfy the requested batch specification."""


class DivergenceError(VprkitError):
    """Training produced a non-finite loss or gradient."""


class FormatError(VprkitError):
    """A binary tensor / checkpoint file is malformed."""
