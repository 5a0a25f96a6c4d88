import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import box_world
from oracles import dijkstra_nav_cost
from lifeloop.errors import DomainError, InsufficientFeasibleTasks, NoPath, NoValidTemplate, PoseInCollision
from lifeloop.planners import (NAV, ArmWorld, Dataset, Lexicon, ManipTask, NavPlanParams, RRTParams,
                               astar_nav, build_dataset, easy_manip_instance, gen_instruction, replay_manip,
                               replay_nav, rrt_manip, sample_start)
from lifeloop.rng import stream
from lifeloop.scenegraph import FLOOR, SURFACE, AssetNode, SceneGraph, relation_edges, world_to_scene
from lifeloop.world import NavAction, Pose, WorldSpec, forward_kinematics, generate_world


def sampled_arm_collision(arm, q, per_link=60):
    """Dense point sampling along each link against each obstacle disc."""
    joints, _ = forward_kinematics(q, arm.link_lengths)
    for a, b in zip(joints[:-1], joints[1:]):
        for t in np.linspace(0, 1, per_link):
            p = a + t * (b - a)
            if any(math.hypot(p[0] - cx, p[1] - cy) < r for cx, cy, r in arm.obstacles):
                return True
    return False


# ---------------------------------------------------------------- nav
def test_nav_trivial_goal():
    w = box_world(10, 10)
    traj = astar_nav(w, Pose(1.125, 1.125, 0), (1.2, 1.2))
    assert traj.actions == [NavAction.STOP] and traj.total_cost == 0


def test_nav_straight_corridor():
    w = box_world(10, 10)
    start = Pose(0.625, 1.125, 0)
    traj = astar_nav(w, start, (1.625, 1.125), NavPlanParams(goal_tol=0.01))
    assert traj.total_cost == pytest.approx(1.0)
    moves = [a for a in traj.actions if a != NavAction.STOP]
    assert moves in ([NavAction.FWD_25] * 4, [NavAction.FWD_50] * 2)
    assert dijkstra_nav_cost(w, start, (1.625, 1.125), 0.01) == traj.cost_units


def test_nav_errors():
    w = box_world(10, 10, walls=[(r, 5) for r in range(10)])
    with pytest.raises(NoPath):
        astar_nav(w, Pose(0.625, 0.625, 0), (2.0, 2.0))
    with pytest.raises(PoseInCollision):
        astar_nav(w, Pose(0.1, 0.1, 0), (1.0, 1.0))
    with pytest.raises(DomainError):
        astar_nav(w, Pose(0.625, 0.625, 0), (9.0, 1.0))


@given(st.integers(0, 10_000))
def test_nav_matches_dijkstra_and_replays(seed):
    w = generate_world(WorldSpec(16, 16, n_rooms=2, object_count=2, seed=seed))
    rng = stream(seed, "test-nav")
    start, goal_pose = sample_start(w, rng), sample_start(w, rng)
    goal = goal_pose.xy
    ref = dijkstra_nav_cost(w, start, goal)
    try:
        traj = astar_nav(w, start, goal, NavPlanParams(record_scans=False))
    except NoPath:
        assert ref is None
        return
    assert traj.cost_units == ref
    final, collided, consistent = replay_nav(w, traj)
    assert not collided and consistent
    assert math.dist(final.xy, goal) <= 0.25


def test_nav_trajectory_round_trip():
    w = box_world(10, 10)
    traj = astar_nav(w, Pose(0.625, 0.625, 90), (1.875, 1.875))
    from lifeloop.planners import NavTrajectory
    back = NavTrajectory.from_dict(traj.to_dict())
    assert back.to_dict() == traj.to_dict()


# ---------------------------------------------------------------- manip
def test_rrt_already_at_target():
    arm = ArmWorld()
    _, ee = forward_kinematics(np.zeros(3), arm.link_lengths)
    traj = rrt_manip(arm, ManipTask((0, 0, 0), tuple(ee)), seed=0)
    assert traj.deltas == []


def test_rrt_free_reach():
    arm = ArmWorld()
    traj = rrt_manip(arm, ManipTask((0, 0, 0), (0.5, 0.2)), seed=1)
    assert traj.ee_error(arm.link_lengths) <= 0.03
    final, collided, max_norm = replay_manip(arm, traj)
    assert not collided and np.allclose(final, traj.final_config)


def test_rrt_errors():
    with pytest.raises(DomainError):
        rrt_manip(ArmWorld(), ManipTask((0, 0, 0), (2.0, 0.0)), seed=0)
    arm = ArmWorld(obstacles=[(0.3, 0.0, 0.05)])
    with pytest.raises(PoseInCollision):
        rrt_manip(arm, ManipTask((0, 0, 0), (0.0, 0.5)), seed=0)


@pytest.mark.parametrize("seed", range(15))
def test_rrt_output_collision_free(seed):
    arm, task = easy_manip_instance(seed)
    traj = rrt_manip(arm, task, seed)
    assert traj.ee_error(arm.link_lengths) <= task.tolerance
    q = np.asarray(task.start_config, dtype=float)
    for d in traj.deltas:
        assert np.linalg.norm(d) <= RRTParams().step + 1e-9
        for t in np.linspace(0, 1, 11):
            assert not sampled_arm_collision(arm, q + t * d)
        q = q + d
    assert np.allclose(q, traj.final_config)


# ---------------------------------------------------------------- instructions
def scene_cup_table():
    walls = np.zeros((16, 16), dtype=bool)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
    nodes = [AssetNode(0, "cup", "red", (1.0, 1.0, 0.1, 0.1), SURFACE),
             AssetNode(1, "table", "brown", (1.6, 1.0, 0.4, 0.4), FLOOR),
             AssetNode(2, "chair", "black", (3.0, 3.0, 0.3, 0.3), FLOOR)]
    return SceneGraph(nodes, relation_edges(nodes), walls)


def test_instruction_examples():
    sc = scene_cup_table()
    rng = np.random.default_rng(0)
    assert gen_instruction(sc, NAV, 0, rng, template_id=0).tokens == ["go", "to", "the", "red", "cup"]
    rel = gen_instruction(sc, NAV, 0, rng, template_id=1)
    assert rel.text == "navigate to the cup near the table" and rel.slots == {"class": 0, "class2": 1}
    with pytest.raises(NoValidTemplate):
        gen_instruction(sc, NAV, 2, rng, template_id=1)
    assert all(gen_instruction(sc, NAV, 2, np.random.default_rng(k)).template_id == 0 for k in range(20))
    a = gen_instruction(sc, NAV, 0, np.random.default_rng(5))
    b = gen_instruction(sc, NAV, 0, np.random.default_rng(5))
    assert a == b


def test_lexicon_covers_templates_and_novel_slots():
    lex = Lexicon.build()
    for word in "go to the navigate near touch move end effector red cup table".split():
        assert lex.index(word) is not None
    assert lex.add_novel("novel_0") and lex.index("novel_0") is not None
    assert Lexicon.from_dict(lex.to_dict()).to_dict() == lex.to_dict()


# ---------------------------------------------------------------- datasets
def gen_pair(seed=3):
    w = generate_world(WorldSpec(20, 20, n_rooms=2, object_count=4, seed=seed))
    return w, world_to_scene(w)


def test_dataset_empty():
    assert len(build_dataset([gen_pair()], 0, 0, seed=0)) == 0


def test_dataset_fifty_nav_verified():
    w, sc = gen_pair()
    ds = build_dataset([(w, sc)], 50, 0, seed=7)
    assert len(ds) == 50 and all(e.task_family == NAV for e in ds.episodes)
    for e in ds.episodes:
        final, collided, consistent = replay_nav(w, e.trajectory)
        assert not collided and consistent
        assert math.dist(final.xy, e.trajectory.task.goal) <= 0.25


def test_dataset_deterministic_and_round_trips():
    pair = gen_pair()
    a = build_dataset([pair], 6, 3, seed=2).to_jsonl()
    assert a == build_dataset([pair], 6, 3, seed=2).to_jsonl()
    assert Dataset.from_jsonl(a).to_jsonl() == a


def test_dataset_insufficient():
    w = box_world(10, 10)
    walls = w.grid.astype(bool)
    with pytest.raises(InsufficientFeasibleTasks):
        build_dataset([(w, SceneGraph([], [], walls))], 3, 0, seed=0)
