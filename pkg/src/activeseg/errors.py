"""Exception types shared across the package."""


class ActiveSegError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ActiveSegError, ValueError):
    pass


class ParseError(ActiveSegError, ValueError):
    """Malformed file content. ``field`` names the offending header key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class EmptyAnnotationError(ActiveSegError):
    """No annotated voxels (or no annotated foreground) where some are required."""


class UndefinedMetricError(ActiveSegError):
    """A metric is mathematically undefined for the given inputs (e.g. empty mask)."""


class ExhaustedPoolError(ActiveSegError):
    """No eligible volumes remain in the pool."""


class InsufficientDataError(ActiveSegError):
    pass
