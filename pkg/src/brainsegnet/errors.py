class ConfigError(ValueError):
    """A configuration value violates its invariants."""


class DataError(ValueError):
    """Input arrays are malformed (bad shape, label out of range, ...)."""


class BundleError(DataError):
    """A volume bundle on disk cannot be loaded."""


class ChecksumError(BundleError):
    pass


class DimensionMismatchError(BundleError):
    pass


class LabelRangeError(BundleError):
    pass


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""
