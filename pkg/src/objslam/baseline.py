"""Hungarian joint data association (JDA): one global assignment per frame
over every landmark in the map, used as the scaling baseline."""
from __future__ import annotations

import time
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .assoc import AssociationResult, Outcome, _check_order, commit_frame, corrected_pose
from .config import LEVEL_NEW, EngineConfig, JDAWeights
from .geom import Box2D, SE3Pose, iou_2d, project_point, project_quadric_bbox
from .mapdb import Detection, Frame, MapDatabase

LEVEL_JDA = "jda"


def hungarian_solve(costs: np.ndarray, gate: Optional[float] = None) -> list[Optional[int]]:
    """Minimum-cost one-to-one assignment, row -> column (or ``None``).

    With ``gate`` set, each row may instead take a private dummy column of
    cost ``gate``; rows whose best option is the dummy stay unassigned.
    """
    costs = np.asarray(costs, dtype=float)
    n, m = costs.shape
    if n == 0:
        return []
    if gate is not None:
        dummy = np.full((n, n), np.inf)
        np.fill_diagonal(dummy, gate)
        costs = np.hstack([costs, dummy])
    out: list[Optional[int]] = [None] * n
    if costs.shape[1] == 0:
        return out
    rows, cols = linear_sum_assignment(costs)
    for r, c in zip(rows, cols):
        if c < m:
            out[int(r)] = int(c)
    return out


def assignment_cost(costs: np.ndarray, assignment: list[Optional[int]], gate: Optional[float] = None) -> float:
    total = 0.0
    for r, c in enumerate(assignment):
        total += (gate or 0.0) if c is None else costs[r, c]
    return float(total)


def _predicted_box(lid: int, db: MapDatabase, T_cw: SE3Pose) -> Optional[Box2D]:
    lm = db.landmarks[lid]
    if lm.quadric is not None:
        return project_quadric_bbox(db.intrinsics, T_cw, lm.quadric)
    prev = db.last_frame
    if prev is not None:
        return next((d.box for d, a in zip(prev.detections, prev.associations) if a == lid), None)
    return None


def jda_cost_matrix(detections: list[Detection], db: MapDatabase, T_cw: SE3Pose,
                    weights: JDAWeights) -> tuple[np.ndarray, list[int]]:
    """Weighted label, centroid-distance and box-overlap cost against all landmarks."""
    ids = sorted(db.landmarks)
    costs = np.zeros((len(detections), len(ids)))
    diag = db.intrinsics.diagonal
    for j, lid in enumerate(ids):
        lm = db.landmarks[lid]
        label = lm.label
        uv = project_point(db.intrinsics, T_cw, lm.centroid)
        box = _predicted_box(lid, db, T_cw)
        for i, det in enumerate(detections):
            c = weights.label * float(label != det.label)
            d = 1.0 if uv is None else min(1.0, float(np.linalg.norm(uv - det.box.center)) / diag)
            c += weights.distance * d
            c += weights.iou * (1.0 - (iou_2d(box, det.box) if box is not None else 0.0))
            costs[i, j] = c
    return costs, ids


def jda_associate_frame(frame: Frame, db: MapDatabase, weights: Optional[JDAWeights] = None,
                        config: Optional[EngineConfig] = None) -> AssociationResult:
    weights = weights or JDAWeights()
    _check_order(frame, db)
    t0 = time.perf_counter()
    pose = corrected_pose(frame, db)
    T_cw = pose.inverse()
    costs, ids = jda_cost_matrix(frame.detections, db, T_cw, weights)
    assignment = hungarian_solve(costs, weights.gate)
    result = AssociationResult(frame.frame_id)
    for i, det in enumerate(frame.detections):
        col = assignment[i]
        if col is None:
            lid = db.create_landmark(det, frame.frame_id, pose)
            result.outcomes.append(Outcome(det.index, lid, LEVEL_NEW, None))
        else:
            lid = ids[col]
            db.update_landmark(lid, det, frame.frame_id, pose)
            result.outcomes.append(Outcome(det.index, lid, LEVEL_JDA, float(costs[i, col])))
    commit_frame(frame, pose, db, result)
    result.elapsed_us = (time.perf_counter() - t0) * 1e6
    return result
