"""Exception taxonomy. Everything raised on purpose derives from MedIQAError."""


class MedIQAError(Exception):
    """Base class for all package errors."""


class DimensionError(MedIQAError):
    """Shapes or extents incompatible with the requested operation."""


class ContractError(MedIQAError):
    """A documented precondition was violated by the caller."""


class NumericError(MedIQAError):
    """Non-finite values where finite ones are required."""


class VocabularyError(MedIQAError):
    """A prompt field value outside its closed vocabulary."""


class ConfigurationError(MedIQAError):
    """Invalid or incomplete run configuration."""


class UndefinedCorrelationError(MedIQAError):
    """Correlation requested on constant (zero-variance) input."""


class UnusableSampleError(MedIQAError):
    """Sample lacks the physical parameter needed for its label."""


class DegenerateRangeError(MedIQAError):
    """Min-max normalization over an empty value range."""


class CorruptCheckpointError(MedIQAError):
    """Checkpoint failed magic/version/shape verification."""


class NotDicomError(MedIQAError):
    """Input bytes are not a DICOM Part-10 file."""


class UnsupportedTransferSyntaxError(MedIQAError):
    """DICOM transfer syntax other than Explicit VR Little Endian."""


class DicomParseError(MedIQAError):
    """Malformed DICOM data element; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
