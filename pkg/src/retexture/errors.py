"""Exception types shared across the package."""


class RetextureError(Exception):
    """Base class for all package errors."""


class ParameterError(RetextureError):
    """An argument has the wrong shape, length or value."""


class ConfigError(RetextureError):
    """A configuration object is internally inconsistent."""


class FormatError(RetextureError):
    """A file on disk does not match its documented format."""


class DatasetError(RetextureError):
    """A dataset is empty, unlabeled or otherwise unusable."""


class MiningError(RetextureError):
    """Triplet mining is impossible for the given batch."""
