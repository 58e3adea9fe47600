"""Exception types shared across the toolkit."""


class MurmurKitError(Exception):
    """Base class for all toolkit errors."""


class ParseError(MurmurKitError):
    """Malformed manifest row, WAV container, or weights file."""


class DuplicatePatientError(MurmurKitError):
    """A patient id appears more than once in a manifest."""


class UnsupportedFormatError(MurmurKitError):
    """WAV file is not mono 16-bit PCM."""


class TooShortError(MurmurKitError):
    """Input shorter than the minimum the operation requires."""


class ShapeError(MurmurKitError):
    """Tensor shapes incompatible with the requested operation."""


class LabelError(MurmurKitError):
    """Class label outside the valid range."""


class StateError(MurmurKitError):
    """Operation called out of order, e.g. backward without a cached forward."""


class EmptyDatasetError(MurmurKitError):
    """Training or evaluation invoked with no samples."""


class CalibrationError(MurmurKitError):
    """Quantization calibration set is empty or unusable."""


class NumericError(MurmurKitError):
    """Non-finite values where finite ones are required."""


class ConfigError(MurmurKitError):
    """Invalid configuration value or precondition violation."""


class DomainError(MurmurKitError):
    """Value outside the operation's domain (e.g. non-binary prediction)."""


class EmptyLocationError(MurmurKitError):
    """Location vote requested with zero segments."""


class EmptyPatientError(MurmurKitError):
    """Patient prediction requested with zero location decisions."""


class CalibrationWarning(UserWarning):
    """Threshold calibration fell back to the default value."""
