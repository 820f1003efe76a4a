"""Exception types shared across the package."""


class CurbscanError(Exception):
    """Base class for all curbscan errors."""


class ValidationError(CurbscanError):
    """Invalid input data, parameters or configuration."""


class ProcessingError(CurbscanError):
    """A pipeline stage could not produce a valid result."""
