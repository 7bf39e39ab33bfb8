"""Multi-modal 3D detection toolkit: a point-cloud transformer branch and
an image transformer branch tied together by cross-modal attention, with
contrastively supervised augmentation and a KITTI-format evaluation kit.
"""

from .config import PipelineConfig, load_config, full_config, scaled_config
from .detection import Box3D
from .fusion import Calibration, project_points
from .kitti import Frame, parse_calib, parse_labels, parse_velodyne
from .network import NetworkParams, forward_full, init_network, trace_shapes
from .pointops import PointCloud

__all__ = [
    "Box3D",
    "Calibration",
    "Frame",
    "NetworkParams",
    "PipelineConfig",
    "PointCloud",
    "forward_full",
    "init_network",
    "load_config",
    "full_config",
    "parse_calib",
    "parse_labels",
    "parse_velodyne",
    "project_points",
    "scaled_config",
    "trace_shapes",
]

__version__ = "0.1.0"
