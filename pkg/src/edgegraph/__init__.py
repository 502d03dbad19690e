"""edgegraph: a desk-scale CNN inference micro-runtime.

Deterministic block/thread kernel emulation, the vision operators that
make object-detection models hard for GPUs (segmented argsort, prefix
scan, NMS, multibox decoding, ROIAlign), explicit-layout tensors,
schedule-templated direct convolution, two-pass heterogeneous
placement with copy insertion, and machine-learning-guided schedule
search with a persistent records database.
"""

from . import conv, graph, simt, tensor, tune, vision
from .simt import CPU, GPU, DeviceBuffer, LaunchConfig, LaunchStats, Session
from .tensor import LayoutTag, Tensor, layout_transform, transform_cost

__version__ = "0.1.0"

__all__ = [
    "CPU",
    "GPU",
    "DeviceBuffer",
    "LaunchConfig",
    "LaunchStats",
    "LayoutTag",
    "Session",
    "Tensor",
    "conv",
    "graph",
    "layout_transform",
    "simt",
    "tensor",
    "transform_cost",
    "tune",
    "vision",
]
