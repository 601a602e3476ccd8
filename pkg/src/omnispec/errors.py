"""Error taxonomy shared across the package.

Exit-code mapping used by the CLI: validation errors -> 2, file/format
errors -> 3, numeric failures -> 4.
"""


class ValidationError(ValueError):
    """Bad argument, shape, or configuration value."""


class ShapeError(ValidationError):
    """Tensor shapes incompatible for the requested operation."""


class FormatError(IOError):
    """A file does not conform to one of the package's binary/text formats."""


class BadMagicError(FormatError):
    """File header magic does not match the expected format tag."""


class VersionError(FormatError):
    """File declares an unsupported format version."""


class TruncationError(FormatError):
    """File ends before the payload declared in its header."""


class PayloadError(FormatError):
    """Payload violates an invariant (non-finite data, bad wavelengths...)."""


class NumericError(RuntimeError):
    """Non-finite loss or other numeric breakdown during a run."""
