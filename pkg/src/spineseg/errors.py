"""Exception types shared across the package."""


class SpinesegError(Exception):
    """Base class for all package errors."""


class ShapeError(SpinesegError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class GeometryError(SpinesegError, ValueError):
    """Spatial extents do not satisfy a divisibility or size constraint."""


class ConfigError(SpinesegError, ValueError):
    """A configuration value violates a constraint."""


class LabelError(SpinesegError, ValueError):
    """Label volume holds a class id outside ``[0, K)``."""


class StateError(SpinesegError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class CheckFailedError(SpinesegError, RuntimeError):
    """A numerical check could not be carried out (non-finite values)."""


class FormatError(SpinesegError, ValueError):
    """A binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TruncationError(FormatError):
    """The payload is shorter or longer than the header declares."""
