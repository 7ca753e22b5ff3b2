"""Exception types raised across the package.

Every error derives from :class:`GeokpError` so callers (notably the CLI)
can separate domain failures from programming errors.
"""


class GeokpError(Exception):
    """Base class for all package errors."""


class AllPointsCoincident(GeokpError, ValueError):
    pass


class InvalidCount(GeokpError, ValueError):
    pass


class NegativeVariance(GeokpError, ValueError):
    pass


class NonOrthonormalRotation(GeokpError, ValueError):
    pass


class InvalidSpec(GeokpError, ValueError):
    pass


class KTooLarge(GeokpError, ValueError):
    pass


class DuplicatePoints(GeokpError, ValueError):
    pass


class DisconnectedGraph(GeokpError):
    """Shortest paths requested on a graph with more than one component."""

    def __init__(self, component_sizes):
        self.component_sizes = sorted((int(s) for s in component_sizes), reverse=True)
        super().__init__(
            f"k-NN graph has {len(self.component_sizes)} components "
            f"(sizes {self.component_sizes[:8]}{'...' if len(self.component_sizes) > 8 else ''})"
        )


class CacheIOError(GeokpError, OSError):
    pass


class BadMagic(GeokpError, ValueError):
    pass


class SizeMismatch(GeokpError, ValueError):
    pass


class ShapeMismatch(GeokpError, ValueError):
    pass


class EmptyCloud(GeokpError, ValueError):
    pass


class TooFewKeypoints(GeokpError, ValueError):
    pass


class TooFewFrames(GeokpError, ValueError):
    pass


class InvalidDims(GeokpError, ValueError):
    pass


class StaleCache(GeokpError, ValueError):
    pass


class MissingGeodesicCache(GeokpError, FileNotFoundError):
    pass


class TooShortSequence(GeokpError, ValueError):
    pass


class BadCheckpoint(GeokpError, ValueError):
    pass


class MissingCorrespondence(GeokpError, ValueError):
    pass


class NonFiniteLoss(GeokpError, FloatingPointError):
    """Raised by the trainer before an update when a loss term is not finite."""

    def __init__(self, term, value, epoch=None):
        self.term = term
        self.value = value
        self.epoch = epoch
        where = f" at epoch {epoch}" if epoch is not None else ""
        super().__init__(f"non-finite loss term {term}={value!r}{where}")
