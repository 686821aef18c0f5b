"""Single-object 3-D tracking on LiDAR pillars with rank-guided token compression."""
from .config import Config, load_config
from .metrics import evaluate_ope, iou3d
from .model import TrackerModel
from .scene import Box3D, PointCloud, Sequence, generate_sequence

__all__ = ["Box3D", "Config", "PointCloud", "Sequence", "TrackerModel", "evaluate_ope", "generate_sequence", "iou3d", "load_config"]
__version__ = "0.1.0"
