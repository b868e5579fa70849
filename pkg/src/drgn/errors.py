"""Exception types shared across the package."""


class DrgnError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DrgnError):
    """Bad configuration file, unknown key, or invalid value."""


class ConfigMismatchError(ConfigError):
    """Checkpoint was produced under an incompatible configuration."""


class PairingError(DrgnError):
    """Low/normal directories do not pair up one-to-one."""


class DecodeError(DrgnError):
    """An image file could not be decoded."""


class FormatError(DrgnError):
    """A checkpoint file is corrupt or not in the expected format."""


class ShapeError(DrgnError):
    """Tensor shape violates an operation's contract."""


class DistributionError(DrgnError):
    """A histogram/distribution input is not normalized or not positive."""


class EmptyReferenceError(DrgnError):
    """Reference image set is empty."""


class EmptyDatasetError(DrgnError):
    """Training or evaluation dataset is empty."""


class GradientError(DrgnError):
    """A non-finite gradient was encountered during optimization."""
