"""Multi-camera visual localization against a prebuilt 3D map."""

from mcloc.localizer import LocalizationResult, LocalizerConfig, localize
from mcloc.mapstore import GlobalMap, load_map, save_map
from mcloc.matcher import QueryFrame
from mcloc.pose import Pose
from mcloc.prior import PosePrior
from mcloc.rig import Camera, CameraRig, default_rig

__all__ = ["Camera", "CameraRig", "GlobalMap", "LocalizationResult", "LocalizerConfig", "Pose",
           "PosePrior", "QueryFrame", "default_rig", "load_map", "localize", "save_map"]
__version__ = "0.1.0"
