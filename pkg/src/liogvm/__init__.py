"""LiDAR-inertial odometry with an iterated error-state Kalman filter and a
Gaussian voxel map."""
from .config import PipelineConfig, load_config, make_config
from .gvm import GaussianVoxelMap
from .manifold import FilterState, boxminus, boxplus
from .pipeline import Odometry, run_sequence

__all__ = [
    "FilterState",
    "GaussianVoxelMap",
    "Odometry",
    "PipelineConfig",
    "boxminus",
    "boxplus",
    "load_config",
    "make_config",
    "run_sequence",
]
__version__ = "0.1.0"
