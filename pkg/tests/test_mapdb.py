import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objslam.config import EngineConfig
from objslam.geom import Box2D, DualQuadric, SE3Pose, Sim3, look_at
from objslam.mapdb import (
    Detection,
    DuplicateKeyFrameError,
    MapDatabase,
    MissingLandmarkError,
    QuadricLandmark,
)

from conftest import K, bare_db, keyframe


def test_detection_confidence_range():
    with pytest.raises(ValueError):
        Detection(Box2D(0, 0, 1, 1), 0, 1.5)


def test_insert_keyframe_bookkeeping():
    db = bare_db(10)
    db.insert_keyframe(keyframe(0, []))
    assert db.object_index == {}
    db.insert_keyframe(keyframe(1, [3, 7]))
    db.insert_keyframe(keyframe(2, [3, 7, 9]))
    assert db.object_index == {3: [1, 2], 7: [1, 2], 9: [2]}


def test_insert_keyframe_rejects_duplicates_and_unknown_landmarks():
    db = bare_db(3)
    db.insert_keyframe(keyframe(5, [0]))
    with pytest.raises(DuplicateKeyFrameError):
        db.insert_keyframe(keyframe(5, [1]))
    with pytest.raises(DuplicateKeyFrameError):
        db.insert_keyframe(keyframe(4, [1]))
    with pytest.raises(MissingLandmarkError):
        db.insert_keyframe(keyframe(6, [42]))
    assert db.kf_order == [5]


def test_covisible_examples():
    db = bare_db(5)
    db.insert_keyframe(keyframe(10, [0, 1, 2]))
    far, near = keyframe(1210, [0, 1, 2, 4]), keyframe(410, [0, 1, 2])
    assert db.covisible_candidates(far, 2, 1000) == [10]
    assert db.covisible_candidates(near, 2, 1000) == []
    assert db.covisible_candidates(keyframe(2000, []), 2, 1000) == []


def brute_covisible(db, kf, th_objs, th_ids):
    mine = set(kf.landmark_ids())
    out = []
    for kid in db.kf_order:
        shared = mine & set(db.keyframes[kid].landmark_ids())
        if kid != kf.id and len(shared) >= th_objs and kf.id - kid >= th_ids:
            out.append(kid)
    return out


@settings(max_examples=60, deadline=None)
@given(
    views=st.lists(st.sets(st.integers(0, 11), max_size=6), min_size=1, max_size=50),
    query=st.sets(st.integers(0, 11), max_size=6),
    th_objs=st.integers(1, 4),
    th_ids=st.integers(0, 30),
    gaps=st.lists(st.integers(1, 4), min_size=50, max_size=50),
)
def test_covisible_matches_brute_force(views, query, th_objs, th_ids, gaps):
    db = bare_db(12)
    kid = 0
    for view, gap in zip(views, gaps):
        kid += gap
        db.insert_keyframe(keyframe(kid, sorted(view)))
    q = keyframe(kid + 1, sorted(query))
    assert db.covisible_candidates(q, th_objs, th_ids) == brute_covisible(db, q, th_objs, th_ids)
    # queues stay strictly increasing and hold each association exactly once
    for lm, queue in db.object_index.items():
        assert all(a < b for a, b in zip(queue, queue[1:]))
        assert queue == [k for k in db.kf_order if lm in db.keyframes[k].associations]


def test_sliding_window_union():
    db = bare_db(5)
    assert db.sliding_window_landmarks(0, 2) == set()
    db.insert_keyframe(keyframe(1, [0]))
    db.insert_keyframe(keyframe(2, [1, 2]))
    db.insert_keyframe(keyframe(3, [2, 3]))
    assert db.sliding_window_landmarks(4, 2) == {1, 2, 3}
    assert db.sliding_window_landmarks(4, 99) == {0, 1, 2, 3}
    assert db.sliding_window_landmarks(4, 1, extra=[4]) == {2, 3, 4}
    # only keyframes strictly preceding the query frame count
    assert db.sliding_window_landmarks(3, 1) == {1, 2}


def test_label_tie_break_and_histogram():
    lm = QuadricLandmark(0, {4: 2, 1: 2, 7: 1}, np.zeros(3), 1.0)
    assert lm.label == 1
    assert lm.observations == 5


def test_create_and_update_landmark_without_points():
    cfg = EngineConfig(n_init=3)
    db = MapDatabase(K, cfg)
    det = Detection(Box2D(300, 220, 340, 260), 2, 0.9)
    pose = SE3Pose(np.eye(3), np.array([1.0, 2.0, 0.0]))
    lid = db.create_landmark(det, 0, pose)
    lm = db.landmarks[lid]
    # unproject the box centre at the configured default depth
    np.testing.assert_allclose(lm.centroid, [1.0, 2.0, cfg.default_depth], atol=1e-12)
    assert lm.histogram == {2: 1} and lm.rho == cfg.default_rho and lm.quadric is None
    other = db.create_landmark(Detection(Box2D(0, 0, 10, 10), 3, 0.5), 0, pose)
    assert other != lid

    db.update_landmark(lid, Detection(det.box, 5, 0.9), 1, pose)
    db.update_landmark(lid, det, 2, pose)
    assert lm.histogram == {2: 2, 5: 1} and lm.label == 2 and lm.last_frame == 2
    with pytest.raises(MissingLandmarkError):
        db.update_landmark(99, det, 3, pose)


def test_quadric_initialises_after_n_init_observations():
    db = MapDatabase(K, EngineConfig(n_init=3))
    obs = DualQuadric(np.array([0.0, 0.0, 4.0]), np.array([0.3, 0.2, 0.4]), np.eye(3))
    det = Detection(Box2D(280, 200, 360, 280), 0, 0.9, observation=obs)
    pose = SE3Pose.identity()
    lid = db.create_landmark(det, 0, pose)
    db.update_landmark(lid, det, 1, pose)
    assert db.landmarks[lid].quadric is None
    db.update_landmark(lid, det, 2, pose)
    q = db.landmarks[lid].quadric
    assert q is not None
    np.testing.assert_allclose(q.center, [0, 0, 4], atol=1e-12)
    np.testing.assert_allclose(db.landmarks[lid].centroid, [0, 0, 4], atol=1e-12)


def test_centroid_is_running_point_mean():
    pts = np.array([[0.0, 0.0, 3.0], [0.2, 0.0, 3.0], [0.0, 0.2, 3.2], [0.1, -0.1, 2.9], [9.0, 9.0, -5.0]])
    db = MapDatabase(K, EngineConfig(), points=pts)
    det = Detection(Box2D(250, 170, 400, 300), 1, 0.9)
    lid = db.create_landmark(det, 0, SE3Pose.identity(), seed_points=np.array([0, 1]))
    np.testing.assert_allclose(db.landmarks[lid].centroid, [0.1, 0, 3])
    db.update_landmark(lid, det, 1, SE3Pose.identity(), points=np.array([1, 2, 3]))
    np.testing.assert_allclose(db.landmarks[lid].centroid, pts[:4].mean(axis=0))
    assert db.points.get(3).landmark == lid and db.points.get(4).landmark is None


def test_gather_points_respects_box_and_ellipsoid_gate():
    pts = np.array([
        [0.0, 0.0, 4.0],    # inside the object
        [0.1, 0.1, 4.1],    # inside
        [0.0, 0.0, 8.0],    # behind the object, same pixel
        [3.0, 0.0, 4.0],    # outside the box
        [0.0, 0.0, -4.0],   # behind the camera
    ])
    cfg = EngineConfig()
    db = MapDatabase(K, cfg, points=pts)
    obs = DualQuadric(np.array([0.0, 0.0, 4.0]), np.array([0.3, 0.3, 0.3]), np.eye(3))
    det = Detection(Box2D(250, 170, 390, 310), 0, 0.9, observation=obs)
    assert sorted(db.gather_points(det, 0, SE3Pose.identity()).tolist()) == [0, 1]
    # without an observation the depth gate around the median is used
    det = Detection(Box2D(250, 170, 390, 310), 0, 0.9)
    got = set(db.gather_points(det, 1, SE3Pose.identity()).tolist())
    assert {0, 1} <= got and 3 not in got and 4 not in got


def test_transform_landmark_moves_everything():
    pts = np.array([[0.0, 0.0, 3.0], [0.2, 0.0, 3.0]])
    db = MapDatabase(K, EngineConfig(n_init=1), points=pts)
    obs = DualQuadric(np.array([0.1, 0.0, 3.0]), np.array([0.3, 0.2, 0.1]), np.eye(3))
    det = Detection(Box2D(250, 170, 400, 300), 1, 0.9, observation=obs)
    lid = db.create_landmark(det, 0, SE3Pose.identity(), seed_points=np.array([0, 1]))
    g = Sim3(look_at(np.zeros(3), np.array([1.0, 0.5, 0.2])).rotation, np.array([1.0, -2.0, 0.5]), 2.0)
    before = db.landmarks[lid].centroid.copy()
    db.transform_landmark(lid, g)
    lm = db.landmarks[lid]
    np.testing.assert_allclose(lm.centroid, g.apply(before), atol=1e-12)
    np.testing.assert_allclose(db.points.positions, g.apply(pts), atol=1e-12)
    np.testing.assert_allclose(lm.quadric.center, g.apply(obs.center), atol=1e-12)
    np.testing.assert_allclose(lm.quadric.half_axes, 2 * obs.half_axes, atol=1e-12)
    # later observations keep averaging in the corrected frame
    db.update_landmark(lid, Detection(det.box, 1, 0.9, observation=obs.transformed(SE3Pose(g.rotation, g.translation))), 1,
                       SE3Pose.identity(), points=np.zeros(0, dtype=np.int64))
    assert np.isfinite(lm.quadric.center).all()


def test_is_keyframe_pose():
    db = bare_db(1, EngineConfig(kf_min_translation=0.05, kf_min_rotation_deg=5.0))
    assert db.is_keyframe_pose(SE3Pose.identity())
    db.insert_keyframe(keyframe(0, []))
    assert not db.is_keyframe_pose(SE3Pose(np.eye(3), np.array([0.04, 0, 0])))
    assert db.is_keyframe_pose(SE3Pose(np.eye(3), np.array([0.05, 0, 0])))
    c, s = np.cos(np.radians(6)), np.sin(np.radians(6))
    assert db.is_keyframe_pose(SE3Pose(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]), np.zeros(3)))


def test_snapshot_round_trip(tmp_path):
    pts = np.array([[0.0, 0.0, 3.0], [0.2, 0.0, 3.0], [1.0, 1.0, 5.0]])
    db = MapDatabase(K, EngineConfig(n_init=1), points=pts)
    obs = DualQuadric(np.array([0.1, 0.0, 3.0]), np.array([0.3, 0.2, 0.1]), np.eye(3))
    pose = look_at(np.array([0.3, -0.2, 0.1]), np.array([0.1, 0.0, 3.0]))
    a = db.create_landmark(Detection(Box2D(250, 170, 400, 300), 1, 0.9, observation=obs), 0, pose,
                           seed_points=np.array([0, 1]))
    b = db.create_landmark(Detection(Box2D(0, 0, 30, 30), 4, 0.7), 0, pose)
    db.insert_keyframe(keyframe(0, [a, b], pose))
    db.insert_keyframe(keyframe(3, [b, None], SE3Pose.identity()))
    path = tmp_path / "map.json"
    db.save(path)
    back = MapDatabase.load(path)
    assert back.to_dict()["covisibility"] == db.to_dict()["covisibility"]
    assert back.kf_order == db.kf_order
    for kid in db.kf_order:
        np.testing.assert_allclose(back.keyframes[kid].pose.matrix(), db.keyframes[kid].pose.matrix(), atol=1e-12)
        assert back.keyframes[kid].associations == db.keyframes[kid].associations
    for lid, lm in db.landmarks.items():
        other = back.landmarks[lid]
        assert other.histogram == lm.histogram and other.label == lm.label and other.point_ids == lm.point_ids
        np.testing.assert_allclose(other.centroid, lm.centroid, atol=1e-12)
    np.testing.assert_allclose(back.landmarks[a].quadric.matrix(), db.landmarks[a].quadric.matrix(), atol=1e-12)
    assert back.next_landmark_id == db.next_landmark_id
    json.loads(path.read_text())
