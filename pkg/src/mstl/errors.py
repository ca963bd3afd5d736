"""Exception hierarchy shared by every module of the package."""


class MstlError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MstlError, ValueError):
    """Operand shapes disagree."""


class GraphError(MstlError, RuntimeError):
    """Misuse of the differentiation tape (e.g. backward before forward)."""


class FormatError(MstlError, ValueError):
    """A file does not carry the expected magic bytes or version."""


class TruncatedError(FormatError):
    """A file ended before all declared content could be read."""


class ValidationError(MstlError, ValueError):
    """Content was readable but violates a declared invariant."""


class TrainingError(MstlError, RuntimeError):
    """Training diverged or could not start."""


class ManifestError(MstlError, ValueError):
    """An experiment manifest violates its schema."""
