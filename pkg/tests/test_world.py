import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import box_world, obj
from oracles import flood_fill
from lifeloop.errors import DomainError, PoseInCollision, UnknownObjectId
from lifeloop.world import (NO_HIT, WALL_TOKEN, ArmWorld, CellState, DynamicsEvent, EventKind, NavAction, Pose,
                            SensorSpec, World, WorldSpec, apply_dynamics, arm_config_collides, cast_scan,
                            forward_kinematics, generate_world, object_cells, sense, step_arm, step_robot)


def free_components(world: World) -> int:
    mask = world.grid == CellState.FREE
    seen = np.zeros_like(mask)
    n = 0
    for r, c in zip(*np.nonzero(mask)):
        if not seen[r, c]:
            seen |= flood_fill(mask, (int(r), int(c)))
            n += 1
    return n


# ---------------------------------------------------------------- generation
def test_minimal_world_connected_with_border():
    w = generate_world(WorldSpec(8, 8, seed=1))
    g = w.grid
    assert (g[0] == CellState.WALL).all() and (g[-1] == CellState.WALL).all()
    assert (g[:, 0] == CellState.WALL).all() and (g[:, -1] == CellState.WALL).all()
    assert free_components(w) == 1
    assert w.objects == []


def test_generation_deterministic():
    spec = WorldSpec(24, 24, n_rooms=2, object_count=4, seed=5)
    assert generate_world(spec).to_json() == generate_world(spec).to_json()


def test_large_world_single_free_component():
    w = generate_world(WorldSpec(64, 64, n_rooms=4, object_count=12, seed=7))
    assert free_components(w) == 1
    assert len(w.objects) == 12


@given(seed=st.integers(0, 2**32 - 1), rooms=st.integers(1, 4), n_obj=st.integers(0, 6))
def test_generated_world_invariants(seed, rooms, n_obj):
    w = generate_world(WorldSpec(32, 32, n_rooms=rooms, object_count=n_obj, seed=seed))
    assert free_components(w) == 1
    # robot-reachable space is connected once objects are placed
    reach = w.clearance()
    rows, cols = np.nonzero(reach)
    assert flood_fill(reach, (int(rows[0]), int(cols[0]))).sum() == reach.sum()
    occupied = np.zeros(w.shape, dtype=bool)
    vocab = {c[0] for c in WorldSpec(8, 8).class_vocabulary}
    for o in w.objects:
        assert o.class_name in vocab
        r, c = w.cell_of(*o.center)
        assert w.grid[r, c] == CellState.FREE
        cells = object_cells(o.center, o.footprint_radius, w.cell_size, w.shape)
        assert (w.grid[cells] == CellState.FREE).all()
        assert not occupied[cells].any()
        occupied[cells] = True


def test_world_json_round_trip():
    w = generate_world(WorldSpec(16, 16, object_count=3, seed=2,
                                 dynamics=[DynamicsEvent(2, EventKind.OBJECT_APPEAR, object_id=1)]))
    w2 = World.from_json(w.to_json())
    assert w2.to_json() == w.to_json()
    assert np.array_equal(w2.grid, w.grid)


def test_spec_validation():
    with pytest.raises(DomainError):
        WorldSpec(4, 16)
    with pytest.raises(DomainError):
        SensorSpec(n_rays=4)
    with pytest.raises(DomainError):
        SensorSpec(dropout_rate=1.5)
    with pytest.raises(UnknownObjectId):
        WorldSpec(16, 16, object_count=1, dynamics=[DynamicsEvent(1, EventKind.OBJECT_APPEAR, object_id=3)])
    with pytest.raises(DomainError):
        Pose(1.0, 1.0, 10)


# ---------------------------------------------------------------- sensing
def test_open_room_rays_hit_only_border():
    w = box_world(40, 40)
    scan = sense(w, Pose(5.0, 5.0, 0))
    assert scan.n_rays == 72
    for r, cls in zip(scan.ranges, scan.hit_class):
        if math.isfinite(r):
            assert cls == WALL_TOKEN
            assert r <= 4.0
    # the border is 4.75 m away on the axes, so axis rays see nothing
    assert scan.ranges[0] == NO_HIT and scan.hit_class[0] != WALL_TOKEN


def test_wall_one_metre_east():
    # pose at x=1.0 (cell col 4 boundary) -> wall cell col 8 starts at x=2.0
    w = box_world(16, 16, walls=[(r, 8) for r in range(1, 15)])
    scan = sense(w, Pose(1.0, 2.125, 0))
    assert scan.ranges[0] == pytest.approx(1.0, abs=1e-9)
    assert scan.hit_class[0] == WALL_TOKEN


def test_object_visibility_follows_activation():
    o = obj(0, "box", (2.125, 2.125), active=2)
    w = box_world(16, 16, objects=[o])
    before = sense(w, Pose(1.125, 2.125, 0), iteration=1)
    after = sense(w, Pose(1.125, 2.125, 0), iteration=2)
    assert before.hit_class[0] != "box"
    assert after.hit_class[0] == "box"
    assert after.ranges[0] < before.ranges[0]


def test_sense_in_collision_raises():
    w = box_world(16, 16)
    with pytest.raises(PoseInCollision):
        sense(w, Pose(0.1, 0.1, 0))


@given(x=st.floats(0.3, 3.7), y=st.floats(0.3, 3.7), theta=st.integers(0, 23))
def test_scan_ranges_bounded(x, y, theta):
    w = box_world(16, 16, sensor=SensorSpec(max_range=2.0))
    scan = cast_scan(w, x, y, theta * 15)
    finite = scan.ranges[np.isfinite(scan.ranges)]
    assert (finite <= 2.0).all() and (finite >= 0).all()
    assert scan.n_rays == 72


def test_dropout_rate_statistics():
    w = box_world(16, 16, sensor=SensorSpec(max_range=8.0, dropout_rate=0.3))
    rng = np.random.default_rng(0)
    misses = sum(np.isinf(sense(w, Pose(2.0, 2.0, 0), rng=rng).ranges).sum() for _ in range(200))
    frac = misses / (200 * 72)
    sigma = math.sqrt(0.3 * 0.7 / (200 * 72))
    assert abs(frac - 0.3) < 4 * sigma


# ---------------------------------------------------------------- stepping
def test_step_robot_examples():
    w = box_world(16, 16)
    p = Pose(1.0, 1.0, 0)
    assert step_robot(w, p, NavAction.STOP) == (p, False)
    q, hit = step_robot(w, p, NavAction.FWD_25)
    assert (q.x, q.y, q.theta, hit) == (1.25, 1.0, 0, False)
    q, hit = step_robot(w, p, NavAction.LEFT_30)
    assert (q.x, q.y, q.theta, hit) == (1.0, 1.0, 30, False)
    q, hit = step_robot(w, p, NavAction.RIGHT_15)
    assert q.theta == 345 and not hit


def test_forward_into_wall_collides():
    # robot at x=1.0, wall face at x=1.5: 0.3 m of clearance ahead of the 0.2 m disc is not enough for 0.5 m
    w = box_world(16, 16, walls=[(r, 6) for r in range(1, 15)])
    p = Pose(1.0, 2.0, 0)
    q, hit = step_robot(w, p, NavAction.FWD_50)
    assert hit and q == p


@given(st.lists(st.sampled_from(list(NavAction)), min_size=1, max_size=40))
def test_random_walk_never_enters_obstacles(actions):
    w = box_world(12, 12, objects=[obj(0, "box", (1.625, 1.625))])
    p = Pose(1.0, 1.0, 0)
    for a in actions:
        p, _ = step_robot(w, p, a)
        assert not w.robot_collides(p.x, p.y)


# ---------------------------------------------------------------- dynamics
def test_apply_dynamics_events():
    o = obj(0, "box", (2.125, 2.125), active=99)
    w = box_world(16, 16, objects=[o])
    w.dynamics = [DynamicsEvent(2, EventKind.OBJECT_APPEAR, object_id=0),
                  DynamicsEvent(3, EventKind.SENSOR_DEGRADE, dropout_rate=0.1)]
    assert apply_dynamics(w, 1).active_objects() == []
    w2 = apply_dynamics(w, 2)
    assert [x.id for x in w2.active_objects()] == [0]
    assert w2.sensor.dropout_rate == 0.0
    assert apply_dynamics(w, 3).sensor.dropout_rate == 0.1
    assert apply_dynamics(w, 5).sensor.dropout_rate == 0.1
    # idempotent
    assert apply_dynamics(w2, 2).to_json() == w2.to_json()


def test_no_events_is_identity():
    w = box_world(16, 16, objects=[obj(0, "box", (2.125, 2.125))])
    out = apply_dynamics(w, 3)
    assert np.array_equal(out.grid, w.grid) and out.objects == w.objects


def test_unknown_object_event_raises():
    w = box_world(16, 16)
    w.dynamics = [DynamicsEvent(1, EventKind.OBJECT_APPEAR, object_id=7)]
    with pytest.raises(UnknownObjectId):
        apply_dynamics(w, 1)


# ---------------------------------------------------------------- arm
def test_forward_kinematics_examples():
    _, ee = forward_kinematics((0, 0, 0))
    assert ee == pytest.approx((0.75, 0.0), abs=1e-12)
    _, ee = forward_kinematics((math.pi / 2, 0, 0))
    assert ee == pytest.approx((0.0, 0.75), abs=1e-12)
    _, ee = forward_kinematics((math.pi / 2, -math.pi / 2, 0))
    assert ee == pytest.approx((0.45, 0.3), abs=1e-12)


def test_step_arm_examples():
    arm = ArmWorld()
    q, hit = step_arm(arm, (0, 0, 0), (0, 0, 0))
    assert not hit and np.allclose(q, 0)
    q, hit = step_arm(arm, (0, 0, 0), (0.1, 0, 0))
    assert not hit and np.allclose(q, (0.1, 0, 0))


def segment_hits_disc(p, q, c, r) -> bool:
    p, q, c = map(np.asarray, (p, q, c))
    d = q - p
    t = np.clip(np.dot(c - p, d) / np.dot(d, d), 0, 1)
    return np.linalg.norm(p + t * d - c) <= r


def test_step_arm_sweep_through_obstacle():
    # obstacle on the straight-arm line at the second link, swept by rotating joint 1 across 0
    arm = ArmWorld(obstacles=[(0.42, 0.0, 0.03)])
    start = (-0.3, 0.0, 0.0)
    q, hit = step_arm(arm, start, (0.6, 0.0, 0.0))
    assert hit and np.allclose(q, start)
    joints, _ = forward_kinematics((0.0, 0.0, 0.0))
    assert segment_hits_disc(joints[1], joints[2], (0.42, 0.0), 0.03)


@given(st.lists(st.floats(-math.pi, math.pi), min_size=3, max_size=3),
       st.floats(-1, 1), st.floats(-1, 1), st.floats(0.02, 0.15))
def test_arm_collision_matches_segment_oracle(q, ox, oy, r):
    arm = ArmWorld(obstacles=[(ox, oy, r)])
    joints, _ = forward_kinematics(q)
    oracle = any(segment_hits_disc(joints[k], joints[k + 1], (ox, oy), r) for k in range(3))
    assert arm_config_collides(arm, q) == oracle


def test_joint_limits_clamp():
    arm = ArmWorld()
    q, hit = step_arm(arm, (3.0, 0, 0), (0.2, 0, 0))
    assert not hit and q[0] == pytest.approx(arm.joint_limit)
