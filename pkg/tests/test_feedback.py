import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import box_world, obj
from lifeloop.errors import DomainError, EmptyRollout
from lifeloop.feedback import (FAILURE, INJECT_ASSET, JOINT_DELTA, PAYLOAD, RAISE_SENSOR_NOISE, SUCCESS,
                               FeedbackBundle, FeedbackWeights, Limits, Rollout, RolloutRecord, SceneEvents,
                               apply_feedback, combine, nav_rollout, robot_feedback, scene_feedback,
                               task_feedback)
from lifeloop.planners import MANIP, NAV, Dataset, Instruction, Lexicon, ManipTask, NavTask
from lifeloop.policy import zero_params
from lifeloop.rng import stream
from lifeloop.scenegraph import INJECTED, AssetLibrary, SceneGraph
from lifeloop.world import NavAction, Pose, Scan, SensorSpec, cast_scan, sense, step_robot

GO_CUP = Instruction("go to the red cup".split(), 0, {"class": 0})


def scan(ranges):
    n = len(ranges)
    return Scan(np.arange(n) * (360.0 / n), np.asarray(ranges, dtype=float), [None] * n, [None] * n,
                -np.ones((n, 2), int))


def scripted_nav(real, sim, start, actions, goal, seed=0):
    """Rollout of a fixed action list with real observations and sim predictions."""
    rng = stream(seed, "scripted")
    pose, records = start, []
    for t, a in enumerate(actions):
        records.append(RolloutRecord(t, pose, sense(real, pose, rng=rng, step=t),
                                     cast_scan(sim, pose.x, pose.y, pose.theta, step=t), a, 0.0))
        pose, _ = step_robot(real, pose, a)
    return Rollout(NAV, NavTask(start, goal, None, GO_CUP), records, FAILURE, pose, 0.0, real.sensor.max_range)


def walls_scene(world):
    return SceneGraph([], [], world.grid.astype(bool))


# ---------------------------------------------------------------- rollouts
def test_rollout_stop_at_goal_succeeds():
    w = box_world(10, 10)
    task = NavTask(Pose(1.125, 1.125, 0), (1.125, 1.125), 0, GO_CUP)
    ro = nav_rollout(w, w, zero_params(), task, Lexicon.build(), Limits())
    assert ro.status == SUCCESS and len(ro.records) == 1 and ro.records[0].reward == 1.0


def test_rollout_stop_away_from_goal_fails():
    w = box_world(10, 10)
    task = NavTask(Pose(0.625, 0.625, 0), (1.875, 1.875), 0, GO_CUP)
    ro = nav_rollout(w, w, zero_params(), task, Lexicon.build(), Limits())
    assert ro.status == FAILURE and all(r.reward == 0 for r in ro.records)


def test_rollout_prediction_misses_novel_object():
    real = box_world(12, 12, objects=[obj(0, "box", (1.625, 0.875), 0.2)])
    sim = box_world(12, 12)
    ro = scripted_nav(real, sim, Pose(0.625, 0.875, 0), [NavAction.STOP], (2.5, 2.5))
    rec = ro.records[0]
    boxed = [i for i, c in enumerate(rec.obs.hit_class) if c == "box"]
    assert boxed
    assert all(rec.pred.ranges[i] - rec.obs.ranges[i] > 0.5 for i in boxed)


# ---------------------------------------------------------------- task feedback
def test_combine_worked_case():
    assert combine(FeedbackWeights(1, 0.1, 0.5, 0.5), 1, 2, 0.2, 0.4) == pytest.approx(1.5, abs=1e-12)


def hand_rollout():
    poses = [Pose(0.0, 0.0, 0), Pose(0.25, 0.0, 0), Pose(0.5, 0.0, 0)]
    obs = [scan([1, 1, 1, 1]), scan([1, 1, 1, 1]), scan([1, 2, np.inf, 1])]
    pred = [scan([1, 1, 1, 3]), scan([1, 1, 1, 1]), scan([1, 2, 4, 1])]
    recs = [RolloutRecord(t, poses[t], obs[t], pred[t], NavAction.FWD_25, r) for t, r in enumerate((0, 0, 1))]
    return Rollout(NAV, NavTask(poses[0], (2.0, 0.0)), recs, SUCCESS, poses[2], 0.5, 4.0)


def test_task_feedback_hand_computed():
    steps, score, attribution = task_feedback(hand_rollout(), FeedbackWeights(1, 0.1, 0.5, 0.5))
    # step 0: transition 0.25, conf 2/4/4, goal 2/2
    # step 1: transition 0.25, conf 0,     goal 1.75/2
    # step 2: terminal,        conf 0 (inf == 4 == max range), goal 1.5/2, reward 1
    expected = [0.025 + 0.0625 + 0.5, 0.025 + 0.4375, 1.0 + 0.375]
    assert [s.f_total for s in steps] == pytest.approx(expected, abs=1e-9)
    assert score == pytest.approx(sum(expected) / 3, abs=1e-9)
    assert attribution == 0
    assert [s.term_transition for s in steps] == pytest.approx([0.25, 0.25, 0.0], abs=1e-12)


def test_task_feedback_zero_case_at_goal():
    # robot reaches the goal and stays: the final record has no transition, conf or goal term
    p0, p1 = Pose(0.0, 0.0, 0), Pose(0.25, 0.0, 0)
    recs = [RolloutRecord(0, p0, scan([1, 1]), scan([1, 1]), NavAction.FWD_25, 0.0),
            RolloutRecord(1, p1, scan([1, 1]), scan([1, 1]), NavAction.STOP, 1.0)]
    steps, _, _ = task_feedback(Rollout(NAV, NavTask(p0, (0.25, 0.0)), recs, SUCCESS, p1, 0.25))
    last = steps[-1]
    assert (last.term_conf, last.term_goal, last.term_transition) == (0.0, 0.0, 0.0)


def test_task_feedback_errors():
    with pytest.raises(EmptyRollout):
        task_feedback(Rollout(NAV, NavTask(Pose(0, 0, 0), (1, 1)), [], FAILURE, Pose(0, 0, 0), 0.0))
    with pytest.raises(DomainError):
        FeedbackWeights(-1, 0, 0, 0)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 5), st.floats(0, 1), st.floats(0, 3)), min_size=1,
                max_size=8), st.tuples(*[st.floats(0, 2)] * 4))
def test_feedback_linear_in_terms(terms, lam):
    from lifeloop.feedback import feedback_from_terms
    w = FeedbackWeights(*lam)
    steps, score, att = feedback_from_terms(terms, w)
    for s, (r, tr, c, g) in zip(steps, terms):
        assert s.f_total == pytest.approx(lam[0] * r + lam[1] * tr + lam[2] * c + lam[3] * g, abs=1e-9)
    assert score == pytest.approx(sum(s.f_total for s in steps) / len(steps), abs=1e-9)
    blame = [lam[2] * c + lam[3] * g for _, _, c, g in terms]
    assert att == blame.index(max(blame))


# ---------------------------------------------------------------- scene feedback
LOOK_AROUND = [NavAction.FWD_25, NavAction.LEFT_30, NavAction.FWD_25, NavAction.RIGHT_30, NavAction.FWD_25,
               NavAction.STOP]


def test_scene_feedback_matching_scene_is_silent():
    w = box_world(12, 12, objects=[obj(0, "cup", (2.125, 2.125))])
    ro = scripted_nav(w, w, Pose(0.625, 0.625, 45), LOOK_AROUND, (2.0, 2.0))
    ev = scene_feedback(ro, walls_scene(w))
    assert ev.novel_objects == [] and ev.directives == [] and ev.dropout_estimate == 0.0


def test_scene_feedback_injects_appeared_box():
    box = obj(0, "box", (1.875, 1.125), 0.2, "brown")
    real, sim = box_world(12, 12, objects=[box]), box_world(12, 12)
    ro = scripted_nav(real, sim, Pose(0.625, 0.625, 0), LOOK_AROUND, (2.5, 2.5))
    ev = scene_feedback(ro, walls_scene(sim))
    assert ev.directives.count(INJECT_ASSET) == 1
    found = ev.novel_objects[0]
    assert found.class_name == "box" and found.color == "brown"
    assert math.dist(found.bbox[:2], box.center) <= 0.5


def test_scene_feedback_wall_evidence_becomes_novel_class():
    real = box_world(12, 12, walls=[(4, 6), (5, 6), (4, 7), (5, 7)])
    sim = box_world(12, 12)
    ro = scripted_nav(real, sim, Pose(0.625, 1.125, 0), LOOK_AROUND, (2.5, 2.5))
    ev = scene_feedback(ro, walls_scene(sim), novel_index=3)
    assert [n.class_name for n in ev.novel_objects] == ["NOVEL_3"]


@pytest.mark.parametrize("seed", range(5))
def test_dropout_estimate(seed):
    sim = box_world(12, 12)
    real = box_world(12, 12, sensor=SensorSpec(dropout_rate=0.1))
    turns = [NavAction.LEFT_15] * 100
    ro = scripted_nav(real, sim, Pose(1.375, 1.375, 0), turns, (2.0, 2.0), seed=seed)
    ev = scene_feedback(ro, walls_scene(sim))
    assert abs(ev.dropout_estimate - 0.1) <= 0.03
    assert RAISE_SENSOR_NOISE in ev.directives


# ---------------------------------------------------------------- robot feedback
def manip_rollout_of(deltas, status=FAILURE, mass=None):
    task = ManipTask((0, 0, 0), (0.5, 0.2), target_mass=mass or 0.0)
    recs = [RolloutRecord(t, np.zeros(3), np.zeros(2), np.zeros(2), np.asarray(d, float), 0.0)
            for t, d in enumerate(deltas)]
    return Rollout(MANIP, task, recs, status, np.zeros(3), 0.0, payload_mass=mass)


def test_robot_feedback_examples():
    nav = Rollout(NAV, NavTask(Pose(0, 0, 0), (1, 1)),
                  [RolloutRecord(t, Pose(0, 0, 0), None, None, a, 0.0)
                   for t, a in enumerate([NavAction.FWD_25, NavAction.LEFT_15, NavAction.RIGHT_15])],
                  FAILURE, Pose(0, 0, 0), 0.0)
    assert robot_feedback(nav).count == 0
    v = robot_feedback(manip_rollout_of([(0.15, 0, 0)]))
    assert [r.kind for r in v.records] == [JOINT_DELTA] and v.records[0].magnitude == pytest.approx(0.15)
    v = robot_feedback(manip_rollout_of([(0.05, 0, 0), (0, 0, 0)], SUCCESS, 0.8), Limits(payload=0.5))
    assert [r.kind for r in v.records] == [PAYLOAD] and v.gated
    tight = robot_feedback(nav, Limits(step_translation=0.2, step_rotation=10))
    assert tight.count == 3


# ---------------------------------------------------------------- apply
def apply(scene, bundle, dataset=None, manip_clip=0.2):
    return apply_feedback(scene, AssetLibrary.from_vocabulary(), SensorSpec(), dataset or Dataset(), bundle,
                          {"translation": 0.5, "rotation": 30.0}, manip_clip)


def test_apply_empty_bundle_is_identity():
    w = box_world(12, 12)
    sc = walls_scene(w)
    res = apply(sc, FeedbackBundle())
    assert res.scene.structure() == sc.structure()
    assert len(res.library) == len(AssetLibrary.from_vocabulary())
    assert res.sensor == SensorSpec() and len(res.dataset) == 0
    assert res.nav_clip == {"translation": 0.5, "rotation": 30.0} and res.manip_clip == 0.2


def test_apply_injects_and_corrects():
    box = obj(0, "box", (1.875, 1.125), 0.2, "brown")
    real, sim = box_world(12, 12, objects=[box]), box_world(12, 12)
    sc = walls_scene(sim)
    ro = scripted_nav(real, sim, Pose(0.625, 0.625, 0), LOOK_AROUND, (2.5, 2.5))
    bundle = FeedbackBundle([ro], [task_feedback(ro)], scene_feedback(ro, sc), [robot_feedback(ro)])
    res = apply(sc, bundle)
    assert len(res.scene.nodes) == 1 and res.scene.nodes[0].provenance == INJECTED
    assert res.library.by_class("box")
    assert res.corrective + res.skipped == 1 and len(res.dataset) == res.corrective
    if res.corrective:
        ep = res.dataset.episodes[0]
        assert ep.weight == 1.0 and ep.task_family == NAV


def test_apply_gated_rollout_gives_no_correction_and_tightens_clip():
    ro = manip_rollout_of([(0.15, 0, 0)])
    viol = robot_feedback(ro)
    bundle = FeedbackBundle([ro], [task_feedback(ro)], SceneEvents(), [viol])
    res = apply(walls_scene(box_world(12, 12)), bundle)
    assert res.corrective == 0 and res.manip_clip == pytest.approx(0.1)


def test_apply_raises_sensor_noise():
    ev = SceneEvents(dropout_estimate=0.12, directives=[RAISE_SENSOR_NOISE])
    res = apply(walls_scene(box_world(12, 12)), FeedbackBundle(scene_events=ev))
    assert res.sensor.dropout_rate == pytest.approx(0.12)
