import numpy as np
import pytest

from objslam.config import EngineConfig
from objslam.geom import Box2D, CameraIntrinsics, SE3Pose
from objslam.mapdb import KeyFrame, MapDatabase, QuadricLandmark

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def bare_db(n_landmarks: int = 0, config: EngineConfig | None = None) -> MapDatabase:
    """A map holding ``n_landmarks`` placeholder landmarks and nothing else."""
    db = MapDatabase(K, config)
    for lid in range(n_landmarks):
        db.landmarks[lid] = QuadricLandmark(lid, {lid % 5: 1}, np.array([lid, 0.0, 0.0]), 1.0)
    db.next_landmark_id = n_landmarks
    return db


def keyframe(kid: int, landmarks, pose: SE3Pose | None = None) -> KeyFrame:
    box = Box2D(0, 0, 10, 10)
    from objslam.mapdb import Detection

    dets = [Detection(box, 0, 0.9, i) for i in range(len(landmarks))]
    return KeyFrame(kid, pose or SE3Pose.identity(), K, dets, list(landmarks), ["2d-iou"] * len(landmarks))


@pytest.fixture
def intrinsics() -> CameraIntrinsics:
    return K


# one line per acceptance criterion, repeated at the end of the session
CRITERIA: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
    CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
