"""Exception types raised across the package."""


class StreamNetError(Exception):
    """Base class; ``kind`` is a short machine-readable tag used by the CLI."""

    kind = "error"


class ShapeError(StreamNetError, ValueError):
    kind = "shape_mismatch"


class SpatialCollapseError(ShapeError):
    kind = "spatial_collapse"


class NonFiniteError(StreamNetError, FloatingPointError):
    kind = "non_finite"


class FormatError(StreamNetError, ValueError):
    kind = "format"


class ConfigError(StreamNetError, ValueError):
    kind = "config"
