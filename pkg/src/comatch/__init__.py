"""Joint weakly supervised semantic matching and object co-segmentation."""

from .estimator import CoMatch
from .geometry import Transform, apply_transform, identity_params, warp
from .objective import HyperParams, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CoMatch",
    "HyperParams",
    "Transform",
    "apply_transform",
    "identity_params",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "warp",
]
