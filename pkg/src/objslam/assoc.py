"""Multi-level verification data association (2D IoU -> label posterior ->
quadric back-projection IoU -> map-point back-projection ratio)."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .config import (
    LEVEL_2D,
    LEVEL_NEW,
    LEVEL_POINTS,
    LEVEL_PRO,
    LEVEL_QUADRIC,
    LEVELS,
    EngineConfig,
)
from .geom import SE3Pose, iou_2d, project_point, project_points, project_quadric_bbox
from .mapdb import Detection, Frame, KeyFrame, MapDatabase


class SequencingError(RuntimeError):
    pass


class Match(NamedTuple):
    landmark: int
    score: float


@dataclass
class Outcome:
    detection: int
    landmark: int
    level: str
    score: Optional[float]

    def to_dict(self) -> dict:
        return {"det": self.detection, "landmark": self.landmark, "level": self.level,
                "score": self.score}


@dataclass
class AssociationResult:
    frame_id: int
    outcomes: list[Outcome] = field(default_factory=list)
    keyframe: bool = False
    elapsed_us: float = 0.0

    def landmark_for(self, det_index: int) -> int:
        return self.outcomes[det_index].landmark

    def to_record(self) -> dict:
        return {"frame_id": self.frame_id, "keyframe": self.keyframe,
                "associations": [o.to_dict() for o in self.outcomes]}


def _argmax(scores: Iterable[tuple[int, float]]) -> Optional[Match]:
    best = None
    for lid, s in sorted(scores):
        if best is None or s > best.score:
            best = Match(lid, s)
    return best


def verify_2d_frame_iou(det: Detection, prev: Optional[KeyFrame], delta1: float,
                        db: MapDatabase, exclude: set[int] = frozenset()) -> Optional[Match]:
    if prev is None:
        return None
    scores = [
        (lid, iou_2d(pdet.box, det.box))
        for pdet, lid in zip(prev.detections, prev.associations)
        if lid is not None and lid not in exclude
    ]
    best = _argmax(scores)
    if best is None or best.score <= delta1 or db.landmarks[best.landmark].label != det.label:
        return None
    return best


def label_posteriors(det: Detection, candidates: Iterable[int], T_cw: SE3Pose,
                     db: MapDatabase, config: EngineConfig) -> tuple[list[tuple[int, float]], float]:
    """Unnormalised posteriors of existing landmarks and of a new object.

    Prior follows a Chinese-restaurant process over histogram counts, the
    label term is Laplace smoothed, and position is a Gaussian on the pixel
    distance between box centre and projected centroid.
    """
    center = det.box.center
    usable = []
    for lid in sorted(candidates):
        lm = db.landmarks[lid]
        uv = project_point(db.intrinsics, T_cw, lm.centroid)
        if uv is None:
            continue
        usable.append((lid, lm, float(np.sum((uv - center) ** 2))))
    total = sum(lm.observations for _, lm, _ in usable)
    denom = total + config.alpha
    two_sigma2 = 2.0 * config.sigma_pos**2
    out = []
    for lid, lm, d2 in usable:
        n = lm.observations
        prior = n / denom
        like_label = (lm.histogram.get(det.label, 0) + 1) / (n + config.num_classes)
        like_pos = math.exp(-d2 / two_sigma2)
        out.append((lid, prior * like_label * like_pos))
    new = config.alpha / denom
    if config.new_object_likelihood:
        # an empty cluster: Laplace label term with zero counts, flat position term
        new /= config.num_classes
    return out, new


def verify_label_posterior(det: Detection, candidates: Iterable[int], T_cw: SE3Pose,
                           db: MapDatabase, config: EngineConfig) -> Optional[Match]:
    posts, new_prior = label_posteriors(det, candidates, T_cw, db, config)
    best = _argmax(posts)
    if best is None or best.score <= new_prior:
        return None
    return best


def verify_quadric_backproj_iou(det: Detection, candidates: Iterable[int], T_cw: SE3Pose,
                                db: MapDatabase, delta2: float) -> Optional[Match]:
    scores = []
    for lid in candidates:
        lm = db.landmarks[lid]
        if lm.quadric is None:
            continue
        box = project_quadric_bbox(db.intrinsics, T_cw, lm.quadric)
        if box is not None:
            scores.append((lid, iou_2d(box, det.box)))
    best = _argmax(scores)
    if best is None or best.score <= delta2 or db.landmarks[best.landmark].label != det.label:
        return None
    return best


def point_ratio(det: Detection, lid: int, T_cw: SE3Pose, db: MapDatabase) -> Optional[float]:
    lm = db.landmarks[lid]
    if not lm.point_ids:
        return None
    pts = db.points.positions[sorted(lm.point_ids)]
    uv, front = project_points(db.intrinsics, T_cw, pts)
    in_image = front & db.intrinsics.image_box().contains(uv)
    n_img = int(in_image.sum())
    if n_img == 0:
        return None
    inside = in_image & det.box.contains(uv)
    return int(inside.sum()) / n_img


def verify_point_backproj_num(det: Detection, candidates: Iterable[int], T_cw: SE3Pose,
                              db: MapDatabase, delta3: float) -> Optional[Match]:
    scores = []
    for lid in candidates:
        if db.landmarks[lid].quadric is not None:
            continue
        r = point_ratio(det, lid, T_cw, db)
        if r is not None:
            scores.append((lid, r))
    best = _argmax(scores)
    if best is None or best.score <= delta3 or db.landmarks[best.landmark].label != det.label:
        return None
    return best


def corrected_pose(frame: Frame, db: MapDatabase) -> SE3Pose:
    return db.pose_correction.apply_pose(frame.pose)


def _check_order(frame: Frame, db: MapDatabase) -> None:
    if db.last_frame is not None and frame.frame_id <= db.last_frame.id:
        raise SequencingError(
            f"frame {frame.frame_id} arrived after frame {db.last_frame.id}")


def commit_frame(frame: Frame, pose: SE3Pose, db: MapDatabase,
                 result: AssociationResult) -> AssociationResult:
    record = KeyFrame(frame.frame_id, pose, frame.intrinsics, list(frame.detections),
                      [o.landmark for o in result.outcomes], [o.level for o in result.outcomes])
    created = db.config.kf_on_new_landmark and any(o.level == LEVEL_NEW for o in result.outcomes)
    result.keyframe = frame.force_keyframe or created or db.is_keyframe_pose(pose)
    if result.keyframe:
        db.insert_keyframe(record)
    db.last_frame = record
    return result


def associate_frame(frame: Frame, db: MapDatabase,
                    config: Optional[EngineConfig] = None) -> AssociationResult:
    config = config or db.config
    _check_order(frame, db)
    t0 = time.perf_counter()
    pose = corrected_pose(frame, db)
    T_cw = pose.inverse()
    window = db.sliding_window_landmarks(frame.frame_id, config.window_size)
    claimed: set[int] = set()
    dets = frame.detections
    matches: list[Optional[tuple[Match, str]]] = [None] * len(dets)

    def try_level(i: int, level: str) -> None:
        det, pool = dets[i], window - claimed
        if level == LEVEL_2D:
            m = verify_2d_frame_iou(det, db.last_frame, config.delta1, db, claimed)
        elif level == LEVEL_PRO:
            m = verify_label_posterior(det, pool, T_cw, db, config)
        elif level == LEVEL_QUADRIC:
            m = verify_quadric_backproj_iou(det, sorted(pool), T_cw, db, config.delta2)
        else:
            m = verify_point_backproj_num(det, sorted(pool), T_cw, db, config.delta3)
        if m is not None:
            matches[i] = (m, level)
            claimed.add(m.landmark)

    levels = [lv for lv in LEVELS if lv in config.levels]
    if config.cascade == "level-major":
        # each level resolves what it can across the frame before the rest fall through
        for level in levels:
            for i in range(len(dets)):
                if matches[i] is None:
                    try_level(i, level)
    else:
        for i in range(len(dets)):
            for level in levels:
                if matches[i] is None:
                    try_level(i, level)

    result = AssociationResult(frame.frame_id)
    for i, det in enumerate(dets):
        if matches[i] is None:
            lid = db.create_landmark(det, frame.frame_id, pose)
            result.outcomes.append(Outcome(det.index, lid, LEVEL_NEW, None))
        else:
            m, level = matches[i]
            db.update_landmark(m.landmark, det, frame.frame_id, pose)
            result.outcomes.append(Outcome(det.index, m.landmark, level, float(m.score)))

    commit_frame(frame, pose, db, result)
    result.elapsed_us = (time.perf_counter() - t0) * 1e6
    return result


def write_association_log(results: Iterable[AssociationResult], path) -> None:
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_record()) + "\n")


def read_association_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
