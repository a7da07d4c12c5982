"""Exception hierarchy shared by all modules."""


class CDError(Exception):
    """Base class for errors raised by cdtrust."""


class ValidationError(CDError, ValueError):
    """Input violates a documented invariant."""


class ShapeError(ValidationError):
    """Array or raster dimensions are incompatible."""


class FormatError(CDError, ValueError):
    """A binary file does not follow its declared format."""


class CorruptionError(FormatError):
    """A binary file is truncated or its payload is inconsistent with its header."""
