"""Object-level SLAM back-end: multi-level data association against quadric
landmarks and loop detection over semantic topological graphs."""
from .config import EngineConfig, JDAWeights, ReferenceCriteria
from .geom import Box2D, CameraIntrinsics, DualQuadric, SE3Pose, Sim3
from .mapdb import Detection, Frame, KeyFrame, MapDatabase, QuadricLandmark

__all__ = [
    "Box2D", "CameraIntrinsics", "Detection", "DualQuadric", "EngineConfig", "Frame",
    "JDAWeights", "KeyFrame", "MapDatabase", "QuadricLandmark", "ReferenceCriteria",
    "SE3Pose", "Sim3",
]
