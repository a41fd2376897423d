"""Exception types raised across the package."""


class HyperShapeError(Exception):
    """Base class for all package errors."""


class BadArgument(HyperShapeError, ValueError):
    pass


class DegenerateCloud(HyperShapeError, ValueError):
    """The cloud has zero spatial extent."""


class GridMismatch(HyperShapeError, ValueError):
    pass


class ShapeMismatch(HyperShapeError, ValueError):
    """Tensor shapes disagree with the declared architecture."""


class BadSpec(HyperShapeError, ValueError):
    pass


class FileError(HyperShapeError, OSError):
    pass


class EmptyView(HyperShapeError):
    """No point projects inside the virtual camera image."""


class DataError(HyperShapeError):
    """A dataset entry is missing or malformed."""
