"""Exception hierarchy shared by every pipeline stage."""


class CousinForgeError(Exception):
    """Base class for all errors raised by this package."""


class OutOfBounds(CousinForgeError):
    """Pixel coordinate outside the image."""


class InvalidDepth(CousinForgeError):
    """Depth missing, non-finite, or not strictly positive at a pixel."""


class EmptyCloud(CousinForgeError):
    """An operation received or produced a point cloud with no points."""


class DegenerateCloud(CousinForgeError):
    """Too few or collinear points for an oriented-box fit."""


class SchemaError(CousinForgeError):
    """Malformed input file or record; `path` points at the offending field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class IoError(CousinForgeError):
    """File could not be read or written."""


class UnknownFrame(CousinForgeError):
    """A detection or mask references a frame_id not present in the input."""


class EmptyCatalog(CousinForgeError):
    """Asset catalog has no entries."""


class NonPositiveDims(CousinForgeError):
    """Box dimensions must be strictly positive."""


class NoCrops(CousinForgeError):
    """Node has no crops carrying the required descriptor."""


class NoPatches(CousinForgeError):
    """Ground node has no pixel patches to match against."""


class NoMaterialsOfKind(CousinForgeError):
    """No ground material of the requested kind in the catalog."""


class EmptySky(CousinForgeError):
    """Sky node has no crop histograms."""


class MissingImage(CousinForgeError):
    """A processed frame has no image although sky extraction needs one."""


class NoGround(CousinForgeError):
    """Scene has no road node to fit a ground plane from."""


class SelectionMissingNode(CousinForgeError):
    """A graph node has no entry in the cousin selection."""


class ZeroError(CousinForgeError):
    """Power-law fit received a point with test error <= 0 (log undefined)."""
