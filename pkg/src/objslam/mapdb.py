"""Pose-point-object map database with the ObjectIndex/KeyFrameQueue
covisibility structure."""
from __future__ import annotations

import json
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .config import EngineConfig
from .geom import (
    Box2D,
    CameraIntrinsics,
    DualQuadric,
    SE3Pose,
    Sim3,
    project_points,
    rotation_angle,
)


class MapError(KeyError):
    pass


class DuplicateKeyFrameError(MapError):
    pass


class MissingLandmarkError(MapError):
    pass


@dataclass
class Detection:
    box: Box2D
    label: int
    confidence: float
    index: int = 0
    # camera-frame ellipsoid measurement supplied with the detection (optional)
    observation: Optional[DualQuadric] = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> dict:
        d = {"box": self.box.as_list(), "label": self.label, "conf": self.confidence}
        if self.observation is not None:
            d["quadric"] = self.observation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, index: int) -> "Detection":
        obs = d.get("quadric")
        return cls(Box2D.from_list(d["box"]), int(d["label"]), float(d["conf"]), index,
                   DualQuadric.from_dict(obs) if obs is not None else None)


@dataclass
class Frame:
    frame_id: int
    pose: SE3Pose  # world-from-camera, as reported by the front-end
    detections: list[Detection]
    intrinsics: CameraIntrinsics
    force_keyframe: bool = False


@dataclass
class KeyFrame:
    id: int
    pose: SE3Pose  # world-from-camera
    intrinsics: CameraIntrinsics
    detections: list[Detection] = field(default_factory=list)
    associations: list[Optional[int]] = field(default_factory=list)
    levels: list[str] = field(default_factory=list)

    @property
    def T_cw(self) -> SE3Pose:
        return self.pose.inverse()

    def landmark_ids(self) -> list[int]:
        return sorted({a for a in self.associations if a is not None})

    def detection_for(self, landmark_id: int) -> Optional[Detection]:
        for det, a in zip(self.detections, self.associations):
            if a == landmark_id:
                return det
        return None


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    landmark: Optional[int] = None


class MapPoints:
    """Columnar store of the sparse point map with a static KD-tree."""

    def __init__(self, positions: Optional[np.ndarray] = None):
        self.positions = np.zeros((0, 3)) if positions is None else np.array(positions, dtype=float).reshape(-1, 3)
        self.owner = np.full(len(self.positions), -1, dtype=np.int64)
        self._tree = cKDTree(self.positions) if len(self.positions) else None

    def __len__(self) -> int:
        return len(self.positions)

    def get(self, pid: int) -> MapPoint:
        owner = int(self.owner[pid])
        return MapPoint(pid, self.positions[pid].copy(), None if owner < 0 else owner)

    def near(self, center: np.ndarray, radius: float) -> np.ndarray:
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        return np.asarray(self._tree.query_ball_point(center, radius), dtype=np.int64)


@dataclass
class QuadricLandmark:
    id: int
    histogram: dict[int, int]
    centroid: np.ndarray
    rho: float
    quadric: Optional[DualQuadric] = None
    point_ids: set[int] = field(default_factory=set)
    last_frame: int = -1
    history: list[tuple[int, int]] = field(default_factory=list)
    _point_sum: np.ndarray = field(default_factory=lambda: np.zeros(3), repr=False)
    # running sums of world-frame ellipsoid observations
    _obs_n: int = field(default=0, repr=False)
    _obs_center: np.ndarray = field(default_factory=lambda: np.zeros(3), repr=False)
    _obs_axes: np.ndarray = field(default_factory=lambda: np.zeros(3), repr=False)
    _obs_orientation: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def label(self) -> int:
        best = max(self.histogram.values())
        return min(k for k, v in self.histogram.items() if v == best)

    @property
    def observations(self) -> int:
        return sum(self.histogram.values())

    def absorb_points(self, ids: Iterable[int], positions: np.ndarray) -> None:
        for pid in ids:
            if pid not in self.point_ids:
                self.point_ids.add(int(pid))
                self._point_sum = self._point_sum + positions[pid]
        if self.point_ids:
            self.centroid = self._point_sum / len(self.point_ids)


class MapDatabase:
    """Keyframes, landmarks, map points and the covisibility index.

    Single writer: the association and loop pipelines mutate it one call at
    a time.
    """

    def __init__(self, intrinsics: CameraIntrinsics, config: Optional[EngineConfig] = None,
                 points: Optional[np.ndarray] = None, local_radius: float = 12.0):
        self.intrinsics = intrinsics
        self.config = config or EngineConfig()
        self.points = MapPoints(points)
        self.local_radius = local_radius
        self.keyframes: dict[int, KeyFrame] = {}
        self.kf_order: list[int] = []
        self.landmarks: dict[int, QuadricLandmark] = {}
        self.object_index: dict[int, list[int]] = {}
        self.last_frame: Optional[KeyFrame] = None
        self.next_landmark_id = 0
        # world correction applied to incoming front-end poses after loop closures
        self.pose_correction = Sim3.identity()
        self._local = (-1, np.zeros(0, dtype=np.int64))

    # ---- keyframes and covisibility -------------------------------------------------

    def is_keyframe_pose(self, pose: SE3Pose) -> bool:
        if not self.kf_order:
            return True
        last = self.keyframes[self.kf_order[-1]].pose
        dt = np.linalg.norm(pose.translation - last.translation)
        dr = np.degrees(rotation_angle(last.rotation.T @ pose.rotation))
        return bool(dt >= self.config.kf_min_translation or dr >= self.config.kf_min_rotation_deg)

    def insert_keyframe(self, kf: KeyFrame) -> int:
        if kf.id in self.keyframes or (self.kf_order and kf.id <= self.kf_order[-1]):
            raise DuplicateKeyFrameError(f"keyframe id {kf.id} already used or out of order")
        for lm in kf.landmark_ids():
            if lm not in self.landmarks:
                raise MissingLandmarkError(lm)
        self.keyframes[kf.id] = kf
        self.kf_order.append(kf.id)
        for lm in kf.landmark_ids():
            self.object_index.setdefault(lm, []).append(kf.id)
        return kf.id

    def shared_landmarks(self, kf: KeyFrame, th_objs: int, th_ids: int) -> dict[int, list[int]]:
        """Keyframe id -> shared landmark ids, from the queues of ``kf``'s landmarks only."""
        shared: dict[int, list[int]] = {}
        for lm in kf.landmark_ids():
            queue = self.object_index.get(lm, ())
            # queues are sorted, so only the prefix satisfies the id gap
            stop = bisect_left(queue, kf.id - th_ids + 1) if th_ids > 0 else len(queue)
            for other in queue[:stop]:
                if other != kf.id:
                    shared.setdefault(other, []).append(lm)
        return {k: v for k, v in sorted(shared.items()) if len(v) >= th_objs}

    def covisible_candidates(self, kf: KeyFrame, th_objs: int, th_ids: int) -> list[int]:
        return list(self.shared_landmarks(kf, th_objs, th_ids))

    def covisibility_group(self, kf_id: int, th_objs: int) -> set[int]:
        kf = self.keyframes[kf_id]
        counts = Counter(other for lm in kf.landmark_ids() for other in self.object_index.get(lm, ()))
        return {k for k, c in counts.items() if c >= th_objs} | {kf_id}

    def sliding_window_landmarks(self, frame_id: int, window: int,
                                 extra: Iterable[int] = ()) -> set[int]:
        stop = bisect_left(self.kf_order, frame_id)
        out = set(extra)
        for kid in self.kf_order[max(0, stop - window):stop]:
            out.update(a for a in self.keyframes[kid].associations if a is not None)
        return out

    # ---- landmarks ---------------------------------------------------------------------

    def _local_unowned(self, frame_id: int, pose: SE3Pose) -> np.ndarray:
        if self._local[0] != frame_id:
            self._local = (frame_id, self.points.near(pose.translation, self.local_radius))
        idx = self._local[1]
        return idx[self.points.owner[idx] < 0]

    def gather_points(self, det: Detection, frame_id: int, pose: SE3Pose) -> np.ndarray:
        """Unowned map points projecting into ``det.box`` near the observed object."""
        idx = self._local_unowned(frame_id, pose)
        if len(idx) == 0:
            return idx
        T_cw = pose.inverse()
        uv, front = project_points(self.intrinsics, T_cw, self.points.positions[idx])
        mask = front & det.box.contains(uv)
        idx = idx[mask]
        if len(idx) == 0:
            return idx
        gate = self.config.point_gate
        if det.observation is not None:
            # normalised radius inside the observed ellipsoid, in its own axes
            q = det.observation.transformed(pose)
            local = (self.points.positions[idx] - q.center) @ q.orientation / q.half_axes
            return idx[np.linalg.norm(local, axis=1) <= self.config.point_gate_scale]
        depth = T_cw.apply(self.points.positions[idx])[:, 2]
        return idx[np.abs(depth - np.median(depth)) <= gate]

    def create_landmark(self, det: Detection, frame_id: int, pose: SE3Pose,
                        seed_points: Optional[np.ndarray] = None) -> int:
        if seed_points is None:
            seed_points = self.gather_points(det, frame_id, pose)
        lid = self.next_landmark_id
        self.next_landmark_id += 1
        depth = (det.observation.center[2] if det.observation is not None
                 else self.config.default_depth)
        fallback = pose.apply(self.intrinsics.unproject(det.box.center, depth))
        lm = QuadricLandmark(lid, {det.label: 1}, fallback, self.config.default_rho,
                             last_frame=frame_id, history=[(frame_id, det.index)])
        self.landmarks[lid] = lm
        self._claim(lm, seed_points)
        self._observe_quadric(lm, det, pose)
        return lid

    def update_landmark(self, lid: int, det: Detection, frame_id: int, pose: SE3Pose,
                        points: Optional[np.ndarray] = None) -> QuadricLandmark:
        lm = self.landmarks.get(lid)
        if lm is None:
            raise MissingLandmarkError(lid)
        lm.histogram[det.label] = lm.histogram.get(det.label, 0) + 1
        lm.last_frame = frame_id
        lm.history.append((frame_id, det.index))
        if points is None:
            points = self.gather_points(det, frame_id, pose)
        self._claim(lm, points)
        self._observe_quadric(lm, det, pose)
        return lm

    def _claim(self, lm: QuadricLandmark, ids: np.ndarray) -> None:
        if len(ids) == 0:
            return
        ids = np.asarray(ids, dtype=np.int64)
        ids = ids[self.points.owner[ids] < 0]
        self.points.owner[ids] = lm.id
        lm.absorb_points(ids.tolist(), self.points.positions)

    def _observe_quadric(self, lm: QuadricLandmark, det: Detection, pose: SE3Pose) -> None:
        if det.observation is not None:
            q = det.observation.transformed(pose)
            lm._obs_n += 1
            lm._obs_center = lm._obs_center + q.center
            lm._obs_axes = lm._obs_axes + q.half_axes
            lm._obs_orientation = q.orientation
        if lm._obs_n and lm.observations >= self.config.n_init:
            center = lm._obs_center / lm._obs_n
            lm.quadric = DualQuadric(center, lm._obs_axes / lm._obs_n, lm._obs_orientation)
            if not lm.point_ids:
                lm.centroid = center

    # ---- loop correction support ------------------------------------------------------

    def transform_landmark(self, lid: int, g: Sim3) -> None:
        """Move a landmark, its observation sums and its owned points by ``g``."""
        lm = self.landmarks[lid]
        if lm.point_ids:
            ids = np.fromiter(sorted(lm.point_ids), dtype=np.int64)
            self.points.positions[ids] = g.apply(self.points.positions[ids])
            lm._point_sum = self.points.positions[ids].sum(axis=0)
        lm.centroid = g.apply(lm.centroid)
        if lm._obs_n:
            lm._obs_center = g.scale * g.rotation @ lm._obs_center + lm._obs_n * g.translation
            lm._obs_axes = lm._obs_axes * g.scale
            lm._obs_orientation = g.rotation @ lm._obs_orientation
        if lm.quadric is not None:
            lm.quadric = DualQuadric(g.apply(lm.quadric.center), lm.quadric.half_axes * g.scale,
                                     g.rotation @ lm.quadric.orientation)

    def landmark_anchor(self, lid: int) -> int:
        """Frame id of the landmark's first observation."""
        return self.landmarks[lid].history[0][0]

    # ---- snapshot ------------------------------------------------------------------------

    def to_dict(self) -> dict:
        kfs = []
        for kid in self.kf_order:
            kf = self.keyframes[kid]
            kfs.append({
                "id": kf.id,
                "pose": {"t": kf.pose.translation.tolist(), "q": kf.pose.quaternion().tolist()},
                "associations": [a for a in kf.associations],
                "levels": list(kf.levels),
            })
        lms = []
        for lid in sorted(self.landmarks):
            lm = self.landmarks[lid]
            lms.append({
                "id": lm.id,
                "label": lm.label,
                "histogram": {str(k): v for k, v in sorted(lm.histogram.items())},
                "centroid": lm.centroid.tolist(),
                "rho": lm.rho,
                "quadric": lm.quadric.to_dict() if lm.quadric is not None else None,
                "points": sorted(lm.point_ids),
                "observations": lm.observations,
            })
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "keyframes": kfs,
            "landmarks": lms,
            "covisibility": {str(k): v for k, v in sorted(self.object_index.items())},
        }

    @classmethod
    def from_dict(cls, d: dict, config: Optional[EngineConfig] = None) -> "MapDatabase":
        db = cls(CameraIntrinsics(**d["intrinsics"]), config)
        for k in d["keyframes"]:
            pose = SE3Pose.from_quaternion(k["pose"]["q"], k["pose"]["t"])
            kf = KeyFrame(k["id"], pose, db.intrinsics, [], list(k["associations"]), list(k["levels"]))
            db.keyframes[kf.id] = kf
            db.kf_order.append(kf.id)
        for l in d["landmarks"]:
            q = DualQuadric.from_dict(l["quadric"]) if l["quadric"] is not None else None
            lm = QuadricLandmark(l["id"], {int(k): v for k, v in l["histogram"].items()},
                                 np.asarray(l["centroid"], float), l["rho"], q, set(l["points"]))
            db.landmarks[lm.id] = lm
        db.object_index = {int(k): list(v) for k, v in d["covisibility"].items()}
        db.next_landmark_id = max(db.landmarks, default=-1) + 1
        return db

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path, config: Optional[EngineConfig] = None) -> "MapDatabase":
        return cls.from_dict(json.loads(Path(path).read_text()), config)
