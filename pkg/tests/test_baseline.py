import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objslam.baseline import LEVEL_JDA, assignment_cost, hungarian_solve, jda_associate_frame
from objslam.config import LEVEL_NEW, JDAWeights
from objslam.evaluate import association_errors, real_objects
from objslam.geom import Box2D, SE3Pose
from objslam.mapdb import Detection, Frame, MapDatabase
from objslam.runner import load_scenario, run_pipeline
from objslam.sim import simulate

from conftest import K


def brute_force(costs):
    """Cheapest full matching of the smaller side, by enumeration."""
    n, m = costs.shape
    if n <= m:
        return min(sum(costs[r, c] for r, c in enumerate(p)) for p in itertools.permutations(range(m), n))
    return min(sum(costs[r, c] for c, r in enumerate(p)) for p in itertools.permutations(range(n), m))


def brute_force_gated(costs, gate):
    """Every row takes a distinct column or stays unassigned at cost ``gate``."""
    n, m = costs.shape
    best = np.inf

    def walk(r, used, total):
        nonlocal best
        if total >= best:
            return
        if r == n:
            best = total
            return
        walk(r + 1, used, total + gate)
        for c in range(m):
            if c not in used:
                walk(r + 1, used | {c}, total + costs[r, c])

    walk(0, frozenset(), 0.0)
    return best


def test_small_examples():
    a = hungarian_solve(np.array([[1.0, 2.0], [3.0, 1.0]]))
    assert a == [0, 1] and assignment_cost(np.array([[1.0, 2.0], [3.0, 1.0]]), a) == 2.0
    c = np.ones((4, 4)) - np.eye(4)
    assert hungarian_solve(c) == [0, 1, 2, 3]
    assert hungarian_solve(np.zeros((0, 3))) == []
    assert hungarian_solve(np.zeros((2, 0)), gate=0.5) == [None, None]


def test_rectangular_rows_assigned_uniquely():
    rng = np.random.default_rng(3)
    a = hungarian_solve(rng.random((3, 5)))
    assert None not in a and len(set(a)) == 3


def test_matches_permutation_search_on_1000_matrices():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, m = rng.integers(1, 7, size=2)
        costs = rng.random((n, m)) * rng.choice([1.0, 10.0, 100.0])
        a = hungarian_solve(costs)
        assigned = [c for c in a if c is not None]
        assert len(assigned) == len(set(assigned)) == min(n, m)
        assert assignment_cost(costs, a) == pytest.approx(brute_force(costs), abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(
    st.integers(1, 5).flatmap(lambda n: st.integers(0, 5).flatmap(
        lambda m: st.lists(st.floats(0, 3), min_size=n * m, max_size=n * m).map(
            lambda v: np.array(v, float).reshape(n, m)))),
    st.floats(0.05, 2.5),
)
def test_gated_assignment_is_optimal(costs, gate):
    a = hungarian_solve(costs, gate)
    assigned = [c for c in a if c is not None]
    assert len(assigned) == len(set(assigned))
    assert assignment_cost(costs, a, gate) == pytest.approx(brute_force_gated(costs, gate), abs=1e-9)


def test_jda_empty_map_and_repeat_frame():
    db = MapDatabase(K)
    dets = [Detection(Box2D(100, 100, 140, 140), 1, 0.9, 0), Detection(Box2D(300, 200, 360, 260), 2, 0.9, 1)]
    r = jda_associate_frame(Frame(0, SE3Pose.identity(), dets, K), db)
    assert [o.level for o in r.outcomes] == [LEVEL_NEW, LEVEL_NEW]
    r2 = jda_associate_frame(Frame(1, SE3Pose.identity(), dets, K), db, JDAWeights())
    assert [o.level for o in r2.outcomes] == [LEVEL_JDA, LEVEL_JDA]
    assert [o.landmark for o in r2.outcomes] == [o.landmark for o in r.outcomes]


def test_jda_noiseless_stream_is_exact():
    sc = load_scenario("noiseless")
    sim = simulate(sc.scene)
    run = run_pipeline(sim, sc.engine, "jda", sc.jda, detect_loops=False)
    assert association_errors(run.records(), sim.truth)["errors"] == 0
    assert len(run.db.landmarks) == len(real_objects(sim.truth))
