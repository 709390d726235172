"""Exception types shared across the package."""


class TexteraseError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TexteraseError):
    """Invalid configuration or mismatched tensor extents."""


class DataError(TexteraseError):
    """Dataset, manifest, or image-file problem."""


class ArchiveError(TexteraseError):
    """Tensor archive could not be read or written."""


class IncompatibleArchiveError(ArchiveError):
    """Archive contents do not match the target module layout."""


class TrainingError(TexteraseError):
    """Unrecoverable failure inside the training loop."""
