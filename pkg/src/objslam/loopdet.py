"""Loop detection by comparing semantic topological graphs of co-observed
quadric landmarks, plus similarity-based loop correction."""
from __future__ import annotations

import json
import math
from functools import lru_cache
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .config import EngineConfig
from .geom import (
    EPS_LEN,
    InsufficientGeometryError,
    PairTransform,
    SE3Pose,
    Sim3,
    rotation_angle,
    umeyama_align,
    vector_pair_transform,
)
from .mapdb import KeyFrame, MapDatabase


@dataclass
class SemanticTopoGraph:
    keyframe: int
    landmark_ids: np.ndarray
    labels: np.ndarray
    centroids: np.ndarray  # camera frame, one row per node
    rho: np.ndarray

    def __len__(self) -> int:
        return len(self.landmark_ids)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return np.triu_indices(len(self), k=1)

    def vectors(self) -> np.ndarray:
        p, q = self.pairs()
        return self.centroids[q] - self.centroids[p]

    def restrict(self, ids: Iterable[int]) -> "SemanticTopoGraph":
        keep = np.isin(self.landmark_ids, list(ids))
        return SemanticTopoGraph(self.keyframe, self.landmark_ids[keep], self.labels[keep],
                                 self.centroids[keep], self.rho[keep])


@dataclass
class LoopCandidate:
    current: int
    candidate: int
    shared: list[int]
    raw_score: float = 0.0
    normalized_score: float = 0.0
    pairs: int = 0


@dataclass
class LoopClosure:
    candidate: LoopCandidate
    relative: Optional[Sim3]  # current camera -> candidate camera
    correction: Optional[Sim3]  # world correction applied to the current keyframe
    consistency: int
    corrected: bool
    gain: Optional[float] = None  # RMS residual removed by the alignment, metres


@dataclass
class LoopDecision:
    """Outcome of one keyframe's loop query, as written to the loop log."""

    best: LoopCandidate
    accepted: bool
    consistency: int
    closure: Optional[LoopClosure] = None

    def to_record(self) -> dict:
        c = self.closure
        return {
            "current": self.best.current,
            "candidate": self.best.candidate,
            "shared": self.best.shared,
            "raw": self.best.raw_score,
            "normalized": self.best.normalized_score,
            "pairs": self.best.pairs,
            "accepted": self.accepted,
            "consistency": self.consistency,
            "transform": c.relative.to_dict() if c is not None and c.relative is not None else None,
            "correction": c.correction.to_dict() if c is not None and c.correction is not None else None,
            "corrected": bool(c is not None and c.corrected),
            "gain": c.gain if c is not None else None,
        }


def loop_match_filter(kf: KeyFrame, db: MapDatabase, th_objs: int, th_ids: int) -> list[LoopCandidate]:
    return [LoopCandidate(kf.id, cid, shared)
            for cid, shared in db.shared_landmarks(kf, th_objs, th_ids).items()]


def extract_topo_graph(kf: KeyFrame, db: MapDatabase) -> Optional[SemanticTopoGraph]:
    """Graph of the keyframe's associated landmarks; ``None`` if fewer than two nodes."""
    ids = [lid for lid in kf.landmark_ids() if np.all(np.isfinite(db.landmarks[lid].centroid))]
    if len(ids) < 2:
        return None
    lms = [db.landmarks[lid] for lid in ids]
    world = np.array([lm.centroid for lm in lms])
    return SemanticTopoGraph(
        kf.id,
        np.array(ids),
        np.array([lm.label for lm in lms]),
        kf.T_cw.apply(world),
        np.array([lm.rho for lm in lms]),
    )


def pair_indicators(v_i, v_j, start_i, start_j) -> PairTransform:
    pt = vector_pair_transform(v_i, v_j)
    t = np.asarray(start_j, dtype=float) - np.asarray(start_i, dtype=float)
    return PairTransform(pt.rotation, pt.scale, pt.angle, pt.axis, t, pt.degenerate)


def rotation_norm(cos_theta, measure: str = "trace"):
    if measure == "trace":
        return (1.0 + 2.0 * cos_theta) / 3.0
    if measure == "frobenius":
        return np.sqrt(3.0) + 0.0 * cos_theta
    return 1.0 + 0.0 * cos_theta


def score_topology(pt: PairTransform, ref_length: float = 1.0, rotation_measure: str = "trace",
                   translation_mode: str = "normalized") -> float:
    """``exp(-|1 - s*n(R) - t|/2)`` for one vector pair.

    ``n(R)`` is the normalised trace by default, and ``t`` is divided by
    ``ref_length`` (the current-frame vector length) in normalized mode.
    """
    n_r = float(rotation_norm(math.cos(pt.angle), rotation_measure))
    t = float(np.linalg.norm(pt.translation))
    if translation_mode == "normalized":
        t /= ref_length
    return math.exp(-0.5 * abs(1.0 - pt.scale * n_r - t))


@lru_cache(maxsize=64)
def _triu(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, k=1)


def _scores(ck_p: np.ndarray, ck_q: np.ndarray, cc_p: np.ndarray, cc_q: np.ndarray,
            config: EngineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Score_topology of each row-aligned vector pair, and the mask of pairs
    long enough to score (the scores cover only those)."""
    vi = ck_q - ck_p
    vj = cc_q - cc_p
    ni = np.sqrt(np.einsum("ij,ij->i", vi, vi))
    nj = np.sqrt(np.einsum("ij,ij->i", vj, vj))
    ok = (ni > EPS_LEN) & (nj > EPS_LEN)
    vi, vj, ni, nj = vi[ok], vj[ok], ni[ok], nj[ok]
    s = nj / ni
    # 1 - cos from the unit-vector gap: exactly 0 for identical vectors
    gap = vi / ni[:, None] - vj / nj[:, None]
    cos = np.maximum(1.0 - 0.5 * np.einsum("ij,ij->i", gap, gap), -1.0)
    n_r = rotation_norm(cos, config.rotation_measure)
    d = cc_p[ok] - ck_p[ok]
    t = np.sqrt(np.einsum("ij,ij->i", d, d))
    if config.translation_mode == "normalized":
        t = t / ni
    return np.exp(-0.5 * np.abs(1.0 - s * n_r - t)), ok


def _pair_scores(ck: np.ndarray, cc: np.ndarray, rho: np.ndarray, config: EngineConfig
                 ) -> tuple[np.ndarray, np.ndarray]:
    p, q = _triu(len(ck))
    scores, ok = _scores(ck[p], ck[q], cc[p], cc[q], config)
    return scores, rho[p[ok]]


def pair_scores(g_k: SemanticTopoGraph, g_c: SemanticTopoGraph, config: EngineConfig
                ) -> tuple[np.ndarray, np.ndarray]:
    """Scores and start-node rho of all valid corresponding vector pairs.

    Both graphs must hold the same landmark ids in the same order.
    """
    return _pair_scores(g_k.centroids, g_c.centroids, g_k.rho, config)


def _similarity(ck: np.ndarray, cc: np.ndarray, rho: np.ndarray, config: EngineConfig
                ) -> Optional[tuple[float, float, int]]:
    scores, w = _pair_scores(ck, cc, rho, config)
    if len(scores) == 0:
        return None
    raw = float(np.sum(w * scores))
    return raw, raw / float(np.sum(w)), len(scores)


def cov_graph_similarity(g_k: SemanticTopoGraph, g_c: SemanticTopoGraph,
                         config: Optional[EngineConfig] = None) -> Optional[tuple[float, float, int]]:
    """(raw, normalized, pair count) over the shared nodes, or ``None``."""
    config = config or EngineConfig()
    shared = np.intersect1d(g_k.landmark_ids, g_c.landmark_ids)
    if len(shared) < 2:
        return None
    a, b = g_k.restrict(shared), g_c.restrict(shared)
    return _similarity(a.centroids, b.centroids, a.rho, config)


class ConsistencyTracker:
    """Counts consecutive keyframes whose best above-threshold candidate falls
    in an overlapping covisibility group."""

    def __init__(self, n_consist: int):
        self.n_consist = n_consist
        self.group: set[int] = set()
        self.count = 0

    def hit(self, group: set[int]) -> int:
        self.count = self.count + 1 if self.group & group else 1
        self.group = set(group)
        return self.count

    def miss(self) -> None:
        self.group = set()
        self.count = 0

    def check(self, group: set[int]) -> bool:
        return self.hit(group) >= self.n_consist


def consistency_check(tracker: ConsistencyTracker, group: set[int], n_consist: Optional[int] = None) -> bool:
    if n_consist is not None:
        tracker.n_consist = n_consist
    return tracker.check(group)


def _observed_centers(kf: KeyFrame, ids: list[int], db: MapDatabase) -> np.ndarray:
    out = []
    T_cw = kf.T_cw
    for lid in ids:
        det = kf.detection_for(lid)
        if det is not None and det.observation is not None:
            out.append(det.observation.center)
        else:
            out.append(T_cw.apply(db.landmarks[lid].centroid))
    return np.array(out)


def relative_transform(kf: KeyFrame, cand: KeyFrame, db: MapDatabase,
                       with_scale: bool = True) -> tuple[Sim3, list[int]]:
    """Similarity mapping current-camera coordinates onto candidate-camera ones."""
    shared = sorted(set(kf.landmark_ids()) & set(cand.landmark_ids()))
    src = _observed_centers(kf, shared, db)
    dst = _observed_centers(cand, shared, db)
    T, s = umeyama_align(src, dst, with_scale)
    return Sim3.from_se3(T, s), shared


def estimate_correction(kf: KeyFrame, candidate_id: int, db: MapDatabase,
                        with_scale: bool = True) -> tuple[Sim3, Sim3, SE3Pose]:
    """(relative transform, world correction, corrected current pose).

    Raises :class:`InsufficientGeometryError` when the shared landmarks cannot
    fix a similarity.
    """
    cand = db.keyframes[candidate_id]
    relative, _ = relative_transform(kf, cand, db, with_scale)
    corr_pose = SE3Pose(cand.pose.rotation @ relative.rotation, cand.pose.apply(relative.translation))
    corrected = Sim3(corr_pose.rotation, corr_pose.translation, relative.scale)
    return relative, corrected @ Sim3.from_se3(kf.pose).inverse(), corr_pose


def correction_magnitude(g: Sim3) -> float:
    """Largest of translation (m), rotation angle (rad) and |log scale|."""
    return max(float(np.linalg.norm(g.translation)), rotation_angle(g.rotation), abs(math.log(g.scale)))


def alignment_gain(kf: KeyFrame, candidate_id: int, relative: Sim3, db: MapDatabase) -> float:
    """RMS landmark residual (m) removed by ``relative`` compared with the
    uncorrected relative pose of the two keyframes."""
    cand = db.keyframes[candidate_id]
    shared = sorted(set(kf.landmark_ids()) & set(cand.landmark_ids()))
    src = _observed_centers(kf, shared, db)
    dst = _observed_centers(cand, shared, db)

    def rms(pred: np.ndarray) -> float:
        return float(np.sqrt(np.mean(np.sum((pred - dst) ** 2, axis=1))))

    return rms((cand.T_cw @ kf.pose).apply(src)) - rms(relative.apply(src))


def apply_correction(kf: KeyFrame, candidate_id: int, correction: Sim3, corr_pose: SE3Pose,
                     db: MapDatabase) -> dict[int, SE3Pose]:
    """Spread ``correction`` linearly (in the similarity tangent space) over
    keyframes after the candidate, re-anchor landmarks first seen there, and
    fold it into the correction applied to incoming front-end poses."""
    span = kf.id - candidate_id
    L = correction.log()
    updates: dict[int, Sim3] = {}
    for kid in db.kf_order:
        if candidate_id < kid <= kf.id:
            updates[kid] = correction if kid == kf.id else Sim3.exp((kid - candidate_id) / span * L)
    new_poses = {}
    for kid, g in updates.items():
        k = db.keyframes[kid]
        k.pose = corr_pose if kid == kf.id else g.apply_pose(k.pose)
        new_poses[kid] = k.pose
    if kf.id not in db.keyframes:
        kf.pose = corr_pose
        new_poses[kf.id] = corr_pose
    for lid, lm in db.landmarks.items():
        anchor = lm.history[0][0] if lm.history else -1
        if candidate_id < anchor <= kf.id:
            db.transform_landmark(lid, updates.get(anchor) or Sim3.exp((anchor - candidate_id) / span * L))
    db.pose_correction = correction @ db.pose_correction
    return new_poses


def loop_correction(kf: KeyFrame, candidate_id: int, db: MapDatabase,
                    with_scale: bool = True) -> tuple[Sim3, Sim3, dict[int, SE3Pose]]:
    """Correct the current keyframe against the candidate and spread the
    correction over the keyframes in between.

    Returns (relative transform, world correction, corrected poses by id).
    """
    relative, correction, corr_pose = estimate_correction(kf, candidate_id, db, with_scale)
    return relative, correction, apply_correction(kf, candidate_id, correction, corr_pose, db)


def detect_loop(kf: KeyFrame, db: MapDatabase, tracker: ConsistencyTracker,
                config: Optional[EngineConfig] = None) -> Optional[LoopDecision]:
    """Query one inserted keyframe. Returns ``None`` when no candidate scores."""
    config = config or db.config
    candidates = loop_match_filter(kf, db, config.th_objs, config.th_ids)
    best: Optional[LoopCandidate] = None
    g_k = extract_topo_graph(kf, db) if candidates else None
    if g_k is not None:
        # every graph is the same world centroids seen from a different pose,
        # so candidate graphs are built directly from the shared rows of g_k
        world = np.array([db.landmarks[lid].centroid for lid in g_k.landmark_ids])
        row = {int(lid): i for i, lid in enumerate(g_k.landmark_ids)}
        # all candidates' vector pairs are scored in one batch
        scored, ip, iq, cc_p, cc_q = [], [], [], [], []
        for cand in candidates:
            idx = np.array([row[lid] for lid in cand.shared if lid in row], dtype=int)
            if len(idx) < 2:
                continue
            T_cw = db.keyframes[cand.candidate].T_cw
            cc = world[idx] @ T_cw.rotation.T + T_cw.translation
            p, q = _triu(len(idx))
            scored.append(cand)
            ip.append(idx[p])
            iq.append(idx[q])
            cc_p.append(cc[p])
            cc_q.append(cc[q])
        if scored:
            ip = np.concatenate(ip)
            scores, ok = _scores(g_k.centroids[ip], g_k.centroids[np.concatenate(iq)],
                                 np.concatenate(cc_p), np.concatenate(cc_q), config)
            owner = np.repeat(np.arange(len(scored)), [len(a) for a in cc_p])[ok]
            w = g_k.rho[ip[ok]]
            bounds = np.searchsorted(owner, np.arange(len(scored) + 1))
            for cand, a, b in zip(scored, bounds[:-1], bounds[1:]):
                if a == b:
                    continue
                raw = float(np.sum(w[a:b] * scores[a:b]))
                cand.raw_score, cand.normalized_score, cand.pairs = raw, raw / float(np.sum(w[a:b])), int(b - a)
                if best is None or cand.normalized_score > best.normalized_score:
                    best = cand
    if best is None:
        tracker.miss()
        return None
    if best.normalized_score <= config.th_score:
        tracker.miss()
        return LoopDecision(best, False, 0)
    group = db.covisibility_group(best.candidate, config.th_objs)
    count = tracker.hit(group)
    if count < config.n_consist:
        return LoopDecision(best, False, count)
    closure = LoopClosure(best, None, None, count, False)
    if config.correct_loops:
        try:
            relative, correction, corr_pose = estimate_correction(kf, best.candidate, db, config.with_scale)
            gain = alignment_gain(kf, best.candidate, relative, db)
            # an alignment that explains the observations barely better than
            # the current poses is estimation noise, not drift
            applied = gain > config.min_correction
            if applied:
                apply_correction(kf, best.candidate, correction, corr_pose, db)
            closure = LoopClosure(best, relative, correction, count, applied, gain)
        except InsufficientGeometryError:
            pass
    return LoopDecision(best, True, count, closure)


def write_loop_log(decisions: Iterable[LoopDecision], path) -> None:
    with open(path, "w") as fh:
        for d in decisions:
            fh.write(json.dumps(d.to_record()) + "\n")


def read_loop_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
