class Splat4dError(Exception):
    """Base exception for splat4dlib."""


class GeometryError(Splat4dError):
    """Raised for invalid camera or rigid-transform inputs."""


class BehindCameraError(GeometryError):
    """Raised when a point cannot be projected because it is behind the camera."""


class GaussianError(Splat4dError):
    """Raised when a Gaussian kernel or segment violates its invariants."""


class SegmentTimeError(GaussianError):
    """Raised when a query time falls outside a segment or the scene timeline."""


class UnsupportedDegreeError(GaussianError):
    """Raised when a spherical-harmonic degree is not supported by an operation."""


class DepthError(Splat4dError):
    """Raised when a depth map holds non-finite values."""


class ShapeError(Splat4dError):
    """Raised when rasters or kernel lists disagree in shape."""


class DynamicsError(Splat4dError):
    """Raised when object velocities cannot be estimated."""


class MissingInstanceError(DynamicsError):
    """Raised when an instance id is absent from a mask or a velocity table."""


class FusionError(Splat4dError):
    """Raised when context frames cannot be aligned or aggregated."""


class RenderError(Splat4dError):
    """Raised when a render request is invalid."""


class ImageError(Splat4dError):
    """Raised when images are unsuitable for a metric."""


class LossConfigError(Splat4dError):
    """Raised when loss weights or loss plugins are misconfigured."""


class FormatError(Splat4dError):
    """Raised when an on-disk raster or archive cannot be parsed."""


class ManifestError(Splat4dError):
    """Raised when a scene manifest is missing or invalid."""
