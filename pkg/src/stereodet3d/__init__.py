"""Stereo 3-D object detection inference engine.

A one-stage anchor-based detector over binocular images: multi-scale siamese
features are matched with light-weight correlation cost volumes, expanded by
densely connected ghost modules, fused hierarchically, and decoded through
statistically normalized 3-D anchors. The package also carries the
surrounding machinery: KITTI-format I/O, block-matching disparity
supervision targets, training losses with analytic gradients, an AP
evaluator, and a construction-time benchmark for the two cost-volume kinds.

Hot kernels run on a compiled extension when available, with a pure-numpy
fallback selected automatically at import; see stereodet3d.backend.
"""

from . import backend
from .config import ModelConfig
from .errors import BackendUnavailable, InputError, InvariantError

__version__ = "0.1.0"

__all__ = [
    "backend",
    "ModelConfig",
    "InputError",
    "InvariantError",
    "BackendUnavailable",
    "__version__",
]
