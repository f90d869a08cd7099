"""Multi-stream intensity-sliced conv nets on a small numpy autodiff core."""

from .errors import ConfigError, FormatError, NonFiniteError, ShapeError, SpatialCollapseError, StreamNetError
from .estimators import IntensitySlicer, StreamingNetClassifier, ZeroNoise
from .imaging import FULL_BAND, NoiseSpec, SliceBand, corrupt_zero_noise, make_bands, slice_image
from .model import (
    ModelSpec,
    build_simple_convnet,
    build_streaming_net,
    build_wide_convnet,
    forward,
    init_state,
    load_checkpoint,
    save_checkpoint,
)
from .optim import Adam, AdamConfig

__version__ = "0.1.0"

__all__ = [
    "Adam", "AdamConfig", "ConfigError", "FULL_BAND", "FormatError", "IntensitySlicer", "ModelSpec",
    "NoiseSpec", "NonFiniteError", "ShapeError", "SliceBand", "SpatialCollapseError", "StreamNetError",
    "StreamingNetClassifier", "ZeroNoise", "build_simple_convnet", "build_streaming_net",
    "build_wide_convnet", "corrupt_zero_noise", "forward", "init_state", "load_checkpoint",
    "make_bands", "save_checkpoint", "slice_image",
]
