"""Exception types shared across the package."""


class SoarError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SoarError, ValueError):
    pass


class SplitError(SoarError, ValueError):
    pass


class DatasetFormatError(SoarError):
    """Raised for malformed headers, shape mismatches and invalid masks."""


class ChecksumError(DatasetFormatError):
    pass


class SingularSystemError(SoarError, ValueError):
    pass


class ProjectionError(SoarError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class HullError(SoarError, ValueError):
    pass


class OcclusionError(SoarError):
    pass


class NumericError(SoarError, ArithmeticError):
    pass


class StateError(SoarError, RuntimeError):
    pass
