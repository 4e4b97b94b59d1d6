"""Exception hierarchy. The CLI maps each category onto an exit code."""


class KSiamError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(KSiamError, ValueError):
    """Invalid configuration value or flag combination."""


class DataError(KSiamError):
    """Problems with dataset files or their contents."""


class ManifestParseError(DataError, ValueError):
    pass


class ManifestConsistencyError(DataError, ValueError):
    pass


class MissingFileError(DataError, FileNotFoundError):
    pass


class UnknownPatientError(DataError, KeyError):
    pass


class NoEligibleSlideError(DataError, ValueError):
    pass


class DimensionError(DataError, ValueError):
    """Raster too small or shapes that do not line up."""


class CapacityError(KSiamError, RuntimeError):
    """A slide cannot provide the requested number of non-overlapping tiles."""

    def __init__(self, message: str, capacity: int | None = None, requested: int | None = None):
        super().__init__(message)
        self.capacity = capacity
        self.requested = requested


class FoldError(KSiamError, ValueError):
    pass
