"""Deterministic synthetic scenes: ellipsoid objects, camera trajectories and
noisy detection streams with ground truth."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ReferenceCriteria, from_dict, to_dict
from .geom import (
    Box2D,
    CameraIntrinsics,
    DualQuadric,
    SE3Pose,
    clip_to_image,
    intersection_over_area,
    look_at,
    project_quadric_bbox,
    rodrigues,
)
from .mapdb import Detection, Frame


@dataclass
class ObjectSpec:
    label: int
    center: list[float]
    half_axes: list[float]
    yaw_deg: float = 0.0
    points: int = 60

    def __post_init__(self):
        if len(self.center) != 3 or len(self.half_axes) != 3:
            raise ValueError("center and half_axes need three entries")
        if min(self.half_axes) <= 0:
            raise ValueError("half-axes must be positive")

    def quadric(self) -> DualQuadric:
        R = rodrigues([0.0, 0.0, 1.0], math.radians(self.yaw_deg))
        return DualQuadric(self.center, self.half_axes, R)


@dataclass
class LayoutSpec:
    """Procedural object placement, expanded once per scene.

    ``ring``: ``count`` objects at radius ``r_min..r_max`` around ``center``.
    ``corridor``: ``count`` objects along x over ``length`` metres, alternating sides.
    ``replicate``: copies of the explicit objects shifted by each ``offsets`` entry.
    """

    kind: str = "ring"
    count: int = 10
    center: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    r_min: float = 0.0
    r_max: float = 1.2
    min_separation: float = 0.6
    length: float = 60.0
    width: float = 1.5
    size_min: float = 0.12
    size_max: float = 0.3
    points: int = 60
    offsets: list[list[float]] = field(default_factory=list)
    seed: int = 0


@dataclass
class TrajectorySpec:
    """Camera path. Kinds: circle, figure8, line, waypoints, segments."""

    kind: str = "circle"
    center: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = 4.0
    height: float = 1.0
    laps: float = 1.0
    frames_per_lap: int = 1000
    phase_deg: float = 0.0
    look: str = "center"
    target_height: float = 0.3
    tilt_deg: float = 0.0  # downward tilt of the "forward" look direction
    start: list[float] = field(default_factory=lambda: [0.0, 0.0, 1.0])
    end: list[float] = field(default_factory=lambda: [10.0, 0.0, 1.0])
    frames: int = 100
    waypoints: list[list[float]] = field(default_factory=list)
    frames_per_segment: int = 50
    segments: list[TrajectorySpec] = field(default_factory=list)


@dataclass
class DriftSpec:
    """World-frame translation offset ramped linearly over [start, end] frames."""

    start: int = 0
    end: int = 0
    translation: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def offset(self, frame_id: int) -> np.ndarray:
        if frame_id <= self.start:
            frac = 0.0
        elif frame_id >= self.end:
            frac = 1.0
        else:
            frac = (frame_id - self.start) / (self.end - self.start)
        return frac * np.asarray(self.translation, dtype=float)


@dataclass
class Dropout:
    """Object hidden from the detector during frames [start, end]."""

    object: int
    start: int
    end: int


@dataclass
class NoiseModel:
    fn_prob: float = 0.0
    fp_rate: float = 0.0
    flip_prob: float = 0.0
    jitter: float = 0.0
    occlusion: bool = False
    occlusion_overlap: float = 0.7
    pose_sigma_t: float = 0.0
    pose_sigma_r: float = 0.0
    obs_sigma_center: float = 0.0
    obs_sigma_axes: float = 0.0
    # random-walk odometry drift: per-frame step sigma (m, rad), accumulated in world frame
    walk_sigma_t: float = 0.0
    walk_sigma_r: float = 0.0
    drift: Optional[DriftSpec] = None
    dropouts: list[Dropout] = field(default_factory=list)

    def __post_init__(self):
        for name in ("fn_prob", "flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.fp_rate < 0 or self.jitter < 0:
            raise ValueError("fp_rate and jitter must be non-negative")


STANDARD_NOISE = dict(fn_prob=0.15, fp_rate=0.5, flip_prob=0.05, jitter=2.0, occlusion=True)


@dataclass
class SceneSpec:
    objects: list[ObjectSpec] = field(default_factory=list)
    layout: Optional[LayoutSpec] = None
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    intrinsics: dict = field(default_factory=lambda: dict(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                                                          width=640, height=480))
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    num_classes: int = 10
    min_visible_fraction: float = 0.5
    min_box_side: float = 8.0
    max_depth: float = 10.0
    min_depth: float = 0.3

    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(**self.intrinsics)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return from_dict(cls, d, "scene")

    def to_dict(self) -> dict:
        return to_dict(self)


@dataclass
class FrameTruth:
    frame_id: int
    pose: SE3Pose  # true world-from-camera
    visible: list[int]
    objects: list[Optional[int]]  # true object per emitted detection, None for false positives

    def to_dict(self) -> dict:
        return {"frame_id": self.frame_id, "pose": pose_to_dict(self.pose),
                "visible": self.visible, "objects": self.objects}

    @classmethod
    def from_dict(cls, d: dict) -> "FrameTruth":
        return cls(d["frame_id"], pose_from_dict(d["pose"]), list(d["visible"]), list(d["objects"]))


@dataclass
class SimOutput:
    scene: SceneSpec
    objects: list[ObjectSpec]
    intrinsics: CameraIntrinsics
    points: np.ndarray
    point_object: np.ndarray
    frames: list[Frame]
    truth: list[FrameTruth]

    @property
    def gt_poses(self) -> list[SE3Pose]:
        return [t.pose for t in self.truth]


def pose_to_dict(p: SE3Pose) -> dict:
    return {"t": [float(x) for x in p.translation], "q": [float(x) for x in p.quaternion()]}


def pose_from_dict(d: dict) -> SE3Pose:
    return SE3Pose.from_quaternion(d["q"], d["t"])


# ---- scene construction ---------------------------------------------------------------


def expand_layout(layout: LayoutSpec, base: list[ObjectSpec], num_classes: int) -> list[ObjectSpec]:
    rng = np.random.default_rng(layout.seed)
    c = np.asarray(layout.center, dtype=float)

    def size() -> list[float]:
        return [float(x) for x in rng.uniform(layout.size_min, layout.size_max, 3)]

    if layout.kind == "replicate":
        out = list(base)
        for off in layout.offsets:
            off = np.asarray(off, dtype=float)
            out += [ObjectSpec(o.label, [float(x) for x in np.asarray(o.center) + off], list(o.half_axes),
                               o.yaw_deg, o.points) for o in base]
        return out
    if layout.kind == "ring":
        out = list(base)
        placed = [np.asarray(o.center, dtype=float) for o in base]
        tries = 0
        while len(out) < len(base) + layout.count:
            tries += 1
            if tries > 100000:
                raise ValueError("could not place objects with the requested separation")
            r = math.sqrt(rng.uniform(layout.r_min**2, layout.r_max**2))
            a = rng.uniform(0.0, 2 * math.pi)
            ax = size()
            p = c + np.array([r * math.cos(a), r * math.sin(a), ax[2]])
            if any(np.linalg.norm(p[:2] - q[:2]) < layout.min_separation for q in placed):
                continue
            placed.append(p)
            out.append(ObjectSpec(int(rng.integers(num_classes)), [float(x) for x in p], ax,
                                  float(rng.uniform(0, 180)), layout.points))
        return out
    if layout.kind == "corridor":
        out = list(base)
        xs = np.linspace(0.0, layout.length, layout.count)
        for i, x in enumerate(xs):
            side = 1.0 if i % 2 == 0 else -1.0
            ax = size()
            y = side * (layout.width + rng.uniform(0.0, 0.5))
            p = c + np.array([x + rng.uniform(-0.05, 0.05), y, ax[2] + rng.uniform(0.0, 1.0)])
            out.append(ObjectSpec(int(rng.integers(num_classes)), [float(v) for v in p], ax,
                                  float(rng.uniform(0, 180)), layout.points))
        return out
    raise ValueError(f"unknown layout kind {layout.kind!r}")


def scene_objects(scene: SceneSpec) -> list[ObjectSpec]:
    if scene.layout is None:
        return list(scene.objects)
    return expand_layout(scene.layout, list(scene.objects), scene.num_classes)


def fibonacci_points(n: int) -> np.ndarray:
    """``n`` near-uniform unit-sphere points."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z**2)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def surface_points(objects: list[ObjectSpec]) -> tuple[np.ndarray, np.ndarray]:
    pts, owner = [], []
    for k, o in enumerate(objects):
        q = o.quadric()
        pts.append((fibonacci_points(o.points) * q.half_axes) @ q.orientation.T + q.center)
        owner.append(np.full(o.points, k))
    if not pts:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return np.vstack(pts), np.concatenate(owner)


# ---- trajectories ------------------------------------------------------------------------


def _orient(positions: np.ndarray, spec: TrajectorySpec) -> list[SE3Pose]:
    if spec.look == "center":
        target = np.asarray(spec.center, dtype=float) + np.array([0.0, 0.0, spec.target_height])
        return [look_at(p, target) for p in positions]
    if spec.look == "forward":
        poses = []
        for i, p in enumerate(positions):
            j = min(i + 1, len(positions) - 1)
            d = positions[j] - positions[j - 1] if len(positions) > 1 else np.array([1.0, 0.0, 0.0])
            if np.linalg.norm(d) < 1e-12:
                d = np.array([1.0, 0.0, 0.0])
            d = d / np.linalg.norm(d)
            if spec.tilt_deg:
                t = math.radians(spec.tilt_deg)
                d = d * math.cos(t) - np.array([0.0, 0.0, math.sin(t)])
            poses.append(look_at(p, p + d))
        return poses
    raise ValueError(f"unknown look mode {spec.look!r}")


def generate_trajectory(spec: TrajectorySpec) -> list[SE3Pose]:
    """World-from-camera poses along the path."""
    c = np.asarray(spec.center, dtype=float)
    if spec.kind in ("circle", "figure8"):
        n = int(round(spec.laps * spec.frames_per_lap))
        if n < 1 or spec.frames_per_lap < 1:
            raise ValueError("trajectory needs at least one frame")
        a = 2 * np.pi * np.arange(n) / spec.frames_per_lap + math.radians(spec.phase_deg)
        if spec.kind == "circle":
            xy = spec.radius * np.column_stack([np.cos(a), np.sin(a)])
        else:
            xy = spec.radius * np.column_stack([np.sin(a), np.sin(a) * np.cos(a)])
        pos = np.column_stack([xy + c[:2], np.full(n, c[2] + spec.height)])
        return _orient(pos, spec)
    if spec.kind == "line":
        if spec.frames < 1:
            raise ValueError("trajectory needs at least one frame")
        f = np.linspace(0.0, 1.0, spec.frames)[:, None]
        pos = (1 - f) * np.asarray(spec.start, float) + f * np.asarray(spec.end, float)
        return _orient(pos, spec)
    if spec.kind == "waypoints":
        wps = np.asarray(spec.waypoints, dtype=float).reshape(-1, 3)
        if len(wps) == 0:
            raise ValueError("waypoint trajectory needs at least one waypoint")
        if len(wps) == 1:
            n = max(spec.frames, 1)
            pos = np.repeat(wps, n, axis=0)
            if spec.look == "forward":
                return [look_at(wps[0], wps[0] + np.array([1.0, 0.0, 0.0]))] * n
            return _orient(pos, spec)
        pos = []
        for a, b in zip(wps[:-1], wps[1:]):
            f = np.arange(spec.frames_per_segment)[:, None] / spec.frames_per_segment
            pos.append((1 - f) * a + f * b)
        pos.append(wps[-1:])
        return _orient(np.vstack(pos), spec)
    if spec.kind == "segments":
        if not spec.segments:
            raise ValueError("segments trajectory needs at least one segment")
        out: list[SE3Pose] = []
        for seg in spec.segments:
            out += generate_trajectory(seg)
        return out
    raise ValueError(f"unknown trajectory kind {spec.kind!r}")


# ---- rendering -----------------------------------------------------------------------------


def _clip_box(u1, v1, u2, v2, K: CameraIntrinsics) -> Optional[Box2D]:
    u1, u2 = sorted((min(max(u1, 0.0), K.width), min(max(u2, 0.0), K.width)))
    v1, v2 = sorted((min(max(v1, 0.0), K.height), min(max(v2, 0.0), K.height)))
    if u2 - u1 < 1.0 or v2 - v1 < 1.0:
        return None
    return Box2D(float(u1), float(v1), float(u2), float(v2))


def visible_part(box: Box2D, occluder: Box2D) -> Optional[Box2D]:
    """Largest axis-aligned piece of ``box`` left uncovered by ``occluder``."""
    iu1, iu2 = max(box.u_min, occluder.u_min), min(box.u_max, occluder.u_max)
    iv1, iv2 = max(box.v_min, occluder.v_min), min(box.v_max, occluder.v_max)
    if iu2 <= iu1 or iv2 <= iv1:
        return box
    pieces = [
        Box2D(box.u_min, box.v_min, iu1, box.v_max),
        Box2D(iu2, box.v_min, box.u_max, box.v_max),
        Box2D(box.u_min, box.v_min, box.u_max, iv1),
        Box2D(box.u_min, iv2, box.u_max, box.v_max),
    ]
    best = max(pieces, key=lambda b: b.area)
    return best if best.area > 0 else None


def visible_objects(objects: list[ObjectSpec], quadrics: list[DualQuadric], K: CameraIntrinsics,
                    T_cw: SE3Pose, scene: SceneSpec) -> list[tuple[int, float, Box2D]]:
    """(object, depth, clipped box) for objects passing the visibility tests."""
    if not objects:
        return []
    centers = T_cw.apply(np.array([q.center for q in quadrics]))
    reach = np.array([max(o.half_axes) for o in objects])
    cand = np.flatnonzero((centers[:, 2] - reach > scene.min_depth) & (centers[:, 2] <= scene.max_depth))
    out = []
    for k in cand:
        full = project_quadric_bbox(K, T_cw, quadrics[k], clip=False)
        if full is None or full.area <= 0:
            continue
        clipped = clip_to_image(full, K)
        if clipped is None or clipped.area / full.area < scene.min_visible_fraction:
            continue
        if min(clipped.width, clipped.height) < scene.min_box_side:
            continue
        out.append((int(k), float(centers[k, 2]), clipped))
    return out


def render_frame(scene: SceneSpec, objects: list[ObjectSpec], quadrics: list[DualQuadric],
                 pose: SE3Pose, frame_id: int, rng: np.random.Generator
                 ) -> tuple[list[Detection], list[int], list[Optional[int]]]:
    """Detections for one true camera pose, plus visible ids and per-detection truth.

    Occluded objects are suppressed when a nearer box covers more than
    ``occlusion_overlap`` of them, otherwise cropped to their visible part.
    Order: visibility, occlusion, false negatives, jitter, label flips,
    false-positive injection.
    """
    K = scene.camera()
    noise = scene.noise
    T_cw = pose.inverse()
    seen = visible_objects(objects, quadrics, K, T_cw, scene)
    hidden = {d.object for d in noise.dropouts if d.start <= frame_id <= d.end}
    seen = [s for s in seen if s[0] not in hidden]
    if noise.occlusion:
        kept: list[tuple[int, float, Box2D]] = []
        for s in sorted(seen, key=lambda s: (s[1], s[0])):
            if any(intersection_over_area(n[2], s[2]) > noise.occlusion_overlap for n in kept):
                continue
            box: Optional[Box2D] = s[2]
            for n in kept:
                box = visible_part(box, n[2]) if box is not None else None
            if box is not None and min(box.width, box.height) >= scene.min_box_side:
                kept.append((s[0], s[1], box))
        seen = sorted(kept, key=lambda s: s[0])
    visible = [s[0] for s in seen]

    raw: list[tuple[Box2D, int, float, Optional[DualQuadric], Optional[int]]] = []
    for k, _, box in seen:
        if rng.random() < noise.fn_prob:
            continue
        if noise.jitter > 0:
            j = rng.normal(0.0, noise.jitter, 4)
            box = _clip_box(box.u_min + j[0], box.v_min + j[1], box.u_max + j[2], box.v_max + j[3], K)
            if box is None:
                continue
        label = objects[k].label
        if rng.random() < noise.flip_prob:
            label = int((label + rng.integers(1, scene.num_classes)) % scene.num_classes)
        q = quadrics[k].transformed(T_cw)
        if noise.obs_sigma_center > 0 or noise.obs_sigma_axes > 0:
            center = q.center + rng.normal(0.0, noise.obs_sigma_center, 3)
            axes = q.half_axes * np.maximum(1.0 + rng.normal(0.0, noise.obs_sigma_axes, 3), 0.1)
            q = DualQuadric(center, axes, q.orientation)
        raw.append((box, label, float(rng.uniform(0.6, 0.99)), q, k))
    for _ in range(int(rng.poisson(noise.fp_rate)) if noise.fp_rate > 0 else 0):
        w, h = rng.uniform(30.0, 160.0, 2)
        u, v = rng.uniform(0.0, K.width - w), rng.uniform(0.0, K.height - h)
        raw.append((Box2D(float(u), float(v), float(u + w), float(v + h)),
                    int(rng.integers(scene.num_classes)), float(rng.uniform(0.3, 0.7)), None, None))

    order = sorted(range(len(raw)), key=lambda i: (-raw[i][2], i))
    dets, truth = [], []
    for idx, i in enumerate(order):
        box, label, conf, q, k = raw[i]
        dets.append(Detection(box, label, conf, idx, q))
        truth.append(k)
    return dets, visible, truth


def _walk_step(noise: NoiseModel, rng: np.random.Generator) -> SE3Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return SE3Pose(rodrigues(axis, rng.normal(0.0, noise.walk_sigma_r)), rng.normal(0.0, noise.walk_sigma_t, 3))


def _estimated_pose(true: SE3Pose, frame_id: int, noise: NoiseModel, rng: np.random.Generator,
                    walk: Optional[SE3Pose] = None) -> SE3Pose:
    est = true if walk is None else walk @ true
    if noise.pose_sigma_t > 0 or noise.pose_sigma_r > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        d = SE3Pose(rodrigues(axis, rng.normal(0.0, noise.pose_sigma_r)), rng.normal(0.0, noise.pose_sigma_t, 3))
        est = est @ d
    if noise.drift is not None:
        est = SE3Pose(est.rotation, est.translation + noise.drift.offset(frame_id))
    return est


def simulate(scene: SceneSpec) -> SimOutput:
    """Render the whole stream; each frame draws from its own ``(seed, frame)`` substream."""
    objects = scene_objects(scene)
    quadrics = [o.quadric() for o in objects]
    K = scene.camera()
    points, owner = surface_points(objects)
    frames, truth = [], []
    walking = scene.noise.walk_sigma_t > 0 or scene.noise.walk_sigma_r > 0
    walk = SE3Pose.identity()
    for fid, pose in enumerate(generate_trajectory(scene.trajectory)):
        rng = np.random.default_rng([scene.seed, fid])
        dets, visible, objs = render_frame(scene, objects, quadrics, pose, fid, rng)
        if walking and fid > 0:
            # rotate about the camera centre so the drift stays local
            step = _walk_step(scene.noise, rng)
            c = pose.translation
            walk = SE3Pose(step.rotation, c - step.rotation @ c + step.translation) @ walk
        frames.append(Frame(fid, _estimated_pose(pose, fid, scene.noise, rng, walk if walking else None),
                            dets, K))
        truth.append(FrameTruth(fid, pose, visible, objs))
    return SimOutput(scene, objects, K, points, owner, frames, truth)


# ---- reference loops -------------------------------------------------------------------------


def reference_loops(ids: list[int], poses: list[SE3Pose],
                    criteria: Optional[ReferenceCriteria] = None, chunk: int = 1024) -> list[tuple[int, int]]:
    """All (current, earlier) keyframe pairs within position and angle limits
    and at least ``min_id_gap`` ids apart, sorted."""
    criteria = criteria or ReferenceCriteria()
    ids_arr = np.asarray(ids, dtype=np.int64)
    if len(ids_arr) == 0:
        return []
    pos = np.array([p.translation for p in poses])
    quat = np.array([p.quaternion() for p in poses])
    cos_half = math.cos(math.radians(criteria.max_angle_deg) / 2.0)
    out = []
    for s in range(0, len(ids_arr), chunk):
        sl = slice(s, s + chunk)
        d = np.linalg.norm(pos[sl, None, :] - pos[None, :, :], axis=2)
        dots = np.abs(quat[sl] @ quat.T)
        gap = ids_arr[sl, None] - ids_arr[None, :]
        ok = (d <= criteria.max_position) & (dots >= cos_half - 1e-12) & (gap >= criteria.min_id_gap)
        for i, j in zip(*np.nonzero(ok)):
            out.append((int(ids_arr[s + i]), int(ids_arr[j])))
    return sorted(out)


# ---- JSON lines I/O --------------------------------------------------------------------------


def frame_to_dict(frame: Frame) -> dict:
    d = {"frame_id": frame.frame_id, "pose": pose_to_dict(frame.pose),
         "detections": [det.to_dict() for det in frame.detections]}
    if frame.force_keyframe:
        d["keyframe"] = True
    return d


def frame_from_dict(d: dict, intrinsics: CameraIntrinsics) -> Frame:
    dets = [Detection.from_dict(x, i) for i, x in enumerate(d["detections"])]
    return Frame(int(d["frame_id"]), pose_from_dict(d["pose"]), dets, intrinsics, bool(d.get("keyframe", False)))


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_stream(out: SimOutput, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_jsonl((frame_to_dict(f) for f in out.frames), d / "frames.jsonl")
    write_jsonl((t.to_dict() for t in out.truth), d / "truth.jsonl")
    scene = out.scene.to_dict()
    scene["objects"] = [to_dict(o) for o in out.objects]
    scene["layout"] = None
    (d / "scene.json").write_text(json.dumps(scene, indent=1))


def read_stream(directory) -> tuple[SceneSpec, list[Frame], list[FrameTruth]]:
    d = Path(directory)
    scene = SceneSpec.from_dict(json.loads((d / "scene.json").read_text()))
    K = scene.camera()
    frames = [frame_from_dict(r, K) for r in read_jsonl(d / "frames.jsonl")]
    truth = [FrameTruth.from_dict(r) for r in read_jsonl(d / "truth.jsonl")]
    return scene, frames, truth


def load_simulation(directory) -> SimOutput:
    """Rebuild a :class:`SimOutput` from a written stream directory."""
    scene, frames, truth = read_stream(directory)
    objects = list(scene.objects)
    points, owner = surface_points(objects)
    return SimOutput(scene, objects, scene.camera(), points, owner, frames, truth)
