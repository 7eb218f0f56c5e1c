"""Construction, loop and timing metrics."""
from __future__ import annotations

import statistics
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .config import ReferenceCriteria
from .mapdb import MapDatabase
from .sim import FrameTruth, ObjectSpec, reference_loops


class InputError(ValueError):
    """Evaluation inputs that do not belong together."""


def f_measure(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class ConstructionReport:
    constructed: int
    real_exist: int
    true_positives: int
    precision: float
    recall: float
    f_measure: float

    @classmethod
    def from_counts(cls, constructed: int, real_exist: int, tp: int) -> "ConstructionReport":
        p = tp / constructed if constructed else 0.0
        r = tp / real_exist if real_exist else 0.0
        return cls(constructed, real_exist, tp, p, r, f_measure(p, r))

    def to_dict(self) -> dict:
        return asdict(self)


def real_objects(truth: Iterable[FrameTruth]) -> list[int]:
    seen: set[int] = set()
    for t in truth:
        seen.update(t.visible)
    return sorted(seen)


def match_landmarks(positions: np.ndarray, labels: Sequence[int], obj_pos: np.ndarray,
                    obj_labels: Sequence[int], r_match: float) -> list[tuple[int, int]]:
    """(landmark row, object row) true-positive matches.

    A landmark matches when its nearest object has the same label, lies
    within ``r_match``, and no other landmark is nearer to that object.
    """
    if len(positions) == 0 or len(obj_pos) == 0:
        return []
    d = np.linalg.norm(positions[:, None, :] - obj_pos[None, :, :], axis=2)
    nearest_obj = np.argmin(d, axis=1)
    nearest_lm = np.argmin(d, axis=0)
    out = []
    for i, j in enumerate(nearest_obj):
        if d[i, j] <= r_match and labels[i] == obj_labels[j] and nearest_lm[j] == i:
            out.append((i, int(j)))
    return out


def eval_construction(db: MapDatabase, objects: Sequence[ObjectSpec], truth: Iterable[FrameTruth],
                      r_match: float = 0.5) -> ConstructionReport:
    """Constructed objects are landmarks that reached quadric initialisation."""
    lms = [db.landmarks[k] for k in sorted(db.landmarks) if db.landmarks[k].quadric is not None]
    real = real_objects(truth)
    pos = np.array([lm.centroid for lm in lms]).reshape(-1, 3)
    obj_pos = np.array([objects[k].center for k in real], dtype=float).reshape(-1, 3)
    tp = match_landmarks(pos, [lm.label for lm in lms], obj_pos, [objects[k].label for k in real], r_match)
    return ConstructionReport.from_counts(len(lms), len(real), len(tp))


def association_errors(records: Iterable[dict], truth: Iterable[FrameTruth]) -> dict:
    """Disagreements with a one-to-one object/landmark correspondence fixed
    at each object's first association."""
    obj_to_lm: dict[int, int] = {}
    lm_to_obj: dict[int, int] = {}
    errors = detections = 0
    for rec, t in zip(records, truth):
        if rec["frame_id"] != t.frame_id:
            raise InputError(f"log frame {rec['frame_id']} does not match truth frame {t.frame_id}")
        for a, obj in zip(rec["associations"], t.objects):
            if obj is None:
                continue
            detections += 1
            lid = a["landmark"]
            if obj not in obj_to_lm and lid not in lm_to_obj:
                obj_to_lm[obj], lm_to_obj[lid] = lid, obj
            elif obj_to_lm.get(obj) != lid or lm_to_obj.get(lid) != obj:
                errors += 1
    return {"errors": errors, "detections": detections, "objects": len(obj_to_lm)}


@dataclass
class LoopReport:
    keyframes: int
    reference_loops: int  # current keyframes with at least one reference partner
    reference_pairs: int
    detected: int
    true_positives: int
    precision: Optional[float]
    recall: float
    pair_recall: float

    def to_dict(self) -> dict:
        return asdict(self)


def eval_loops(loop_records: Iterable[dict], keyframe_ids: Sequence[int],
               reference: Sequence[tuple[int, int]], tolerance: int = 2,
               run_ids: Optional[tuple[str, str]] = None) -> LoopReport:
    """Score accepted loops against reference keyframe pairs.

    A detection (current, candidate) is a true positive when the reference
    set holds (current, c) with c within ``tolerance`` keyframe positions of
    the candidate.
    """
    if run_ids is not None and run_ids[0] != run_ids[1]:
        raise InputError(f"loop log from run {run_ids[0]} scored against reference from run {run_ids[1]}")
    order = {k: i for i, k in enumerate(keyframe_ids)}
    partners: dict[int, list[int]] = {}
    for cur, cand in reference:
        partners.setdefault(cur, []).append(order[cand])
    accepted = [r for r in loop_records if r["accepted"]]
    tp = 0
    for r in accepted:
        pos = order.get(r["candidate"])
        if pos is not None and any(abs(pos - c) <= tolerance for c in partners.get(r["current"], ())):
            tp += 1
    n_ref = len(partners)
    return LoopReport(
        keyframes=len(keyframe_ids),
        reference_loops=n_ref,
        reference_pairs=len(reference),
        detected=len(accepted),
        true_positives=tp,
        precision=tp / len(accepted) if accepted else None,
        recall=tp / n_ref if n_ref else 0.0,
        pair_recall=tp / len(reference) if reference else 0.0,
    )


def keyframe_reference(records: Iterable[dict], truth: Sequence[FrameTruth],
                       criteria: Optional[ReferenceCriteria] = None) -> tuple[list[int], list[tuple[int, int]]]:
    """Keyframe ids from an association log and their reference loop pairs."""
    by_id = {t.frame_id: t for t in truth}
    ids = [r["frame_id"] for r in records if r["keyframe"]]
    return ids, reference_loops(ids, [by_id[k].pose for k in ids], criteria)


# ---- timing -------------------------------------------------------------------------------------


STAGES = (10, 100, 1000)


@dataclass
class TimingReport:
    # method -> {stage frame count: mean per-frame ms}
    stages: dict[str, dict[int, float]] = field(default_factory=dict)

    def ratio(self, method: str, hi: int = 1000, lo: int = 10) -> float:
        s = self.stages[method]
        return s[hi] / s[lo]

    def to_dict(self) -> dict:
        return {"stages": {m: {str(k): v for k, v in s.items()} for m, s in self.stages.items()}}


def stage_means(per_frame_us: Sequence[float], stages: Sequence[int] = STAGES) -> dict[int, float]:
    """Mean ms over the last tenth (at least 10 frames) of each stage's first N frames."""
    n = len(per_frame_us)
    usable = [s for s in stages if s <= n] or [n]
    out = {}
    for s in usable:
        lo = max(0, min(s - s // 10, s - 10))
        out[s] = float(np.mean(per_frame_us[lo:s])) / 1000.0
    return out


def bench_timing(run_method: Callable[[str], list[float]], methods: Sequence[str],
                 repeats: int = 3, stages: Sequence[int] = STAGES) -> TimingReport:
    """``run_method(name)`` replays the stream on a fresh map and returns
    per-frame microseconds; the per-frame median over repeats is staged."""
    report = TimingReport()
    for m in methods:
        runs = [run_method(m) for _ in range(repeats)]
        per_frame = [statistics.median(col) for col in zip(*runs)]
        report.stages[m] = stage_means(per_frame, stages)
    return report
