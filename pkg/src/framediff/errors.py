"""Exception types shared across the package.

Everything derives from FramediffError (a ValueError), so callers that
only care about "bad input" can catch one base class.
"""


class FramediffError(ValueError):
    """Base class for every error this package raises on bad input."""


class ShapeError(FramediffError):
    """Tensor extents do not line up for the requested operation."""


class MaskedRowError(FramediffError):
    """A softmax row admits no entries (malformed attention mask)."""


class DomainError(FramediffError):
    """Scalar argument outside its documented domain (e.g. t not in [0,1])."""


class SingularityError(FramediffError):
    """Conversion requires dividing by a near-zero schedule coefficient."""


class GeometryError(FramediffError):
    """Frame geometry disagrees with the model or dataset configuration."""


class FrameOrderError(FramediffError):
    """KV-cache append with a non-increasing frame index."""


class CapacityError(FramediffError):
    """KV-cache append beyond the declared capacity."""


class FormatError(FramediffError):
    """Malformed dataset or checkpoint file."""


class DivergenceError(FramediffError):
    """Non-finite values encountered during training or sampling."""
