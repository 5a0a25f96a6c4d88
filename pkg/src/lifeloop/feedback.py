"""Deployment rollouts and the task, scene and robot feedback channels."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyRollout, NoPath, PlanningTimeout, PoseInCollision, DomainError
from .planners import (MANIP, NAV, Dataset, Episode, ManipTask, NavPlanParams, NavTask, arm_world_from_scene,
                       astar_nav, rrt_manip)
from .policy import ArmObs, PolicyParams, act, featurize
from .rng import stream
from .scenegraph import (BBOX_PAD, CLUSTER_RADIUS, INJECTED, SURFACE, SURFACE_MAX_HALF, FLOOR, AssetLibrary,
                         AssetNode, AssetPrototype, SceneGraph, cluster_semantic_hits, relation_edges,
                         scene_to_simworld)
from .explore import SemanticHit
from .world import (PRIMITIVES, WALL_TOKEN, ArmWorld, NavAction, SensorSpec, World, cast_scan,
                    forward_kinematics, sense, step_arm, step_robot)

SUCCESS, FAILURE, TIMEOUT, SAFETY_ABORT = "SUCCESS", "FAILURE", "TIMEOUT", "SAFETY_ABORT"
SUCCESS_RADIUS = 0.5
NOVEL_MARGIN = 0.5
NOVEL_MIN_STEPS = 3
DROPOUT_PRED_FRACTION = 0.8
DROPOUT_TRIGGER = 0.05
INJECT_ASSET, RAISE_SENSOR_NOISE = "INJECT_ASSET", "RAISE_SENSOR_NOISE"
STEP_TRANSLATION, STEP_ROTATION, JOINT_DELTA, PAYLOAD = "STEP_TRANSLATION", "STEP_ROTATION", "JOINT_DELTA", "PAYLOAD"


@dataclass(frozen=True)
class FeedbackWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.5
    lambda4: float = 0.5

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise DomainError("feedback weights must be non-negative")


@dataclass(frozen=True)
class Limits:
    step_translation: float = 0.5
    step_rotation: float = 30.0  # degrees
    joint_delta: float = 0.1  # radians, delta norm
    payload: float = 0.5  # kg
    abort_on_violation: bool = False

    def __post_init__(self):
        if min(self.step_translation, self.step_rotation, self.joint_delta, self.payload) <= 0:
            raise DomainError("limits must be positive")


@dataclass
class RolloutRecord:
    step: int
    state: object  # Pose (nav) or joint config (manip)
    obs: object  # Scan (nav) or observed target point (manip)
    pred: object  # predicted Scan / predicted target point
    action: object  # NavAction or emitted joint delta
    reward: float


@dataclass
class Rollout:
    family: str
    task: object
    records: list
    status: str
    final_state: object
    path_length: float
    max_range: float = 4.0
    reach: float = 0.75
    min_goal_dist: float = math.inf
    payload_mass: float | None = None  # mass lifted at manip success
    link_lengths: tuple = (0.3, 0.25, 0.2)

    def goal_point(self) -> np.ndarray:
        return np.asarray(self.task.goal if self.family == NAV else self.task.target, dtype=float)

    def to_dict(self) -> dict:
        recs = []
        for r in self.records:
            if self.family == NAV:
                rec = {"state": r.state.to_list(), "obs": r.obs.to_dict(), "pred": r.pred.to_dict(),
                       "action": NavAction(r.action).name}
            else:
                rec = {"state": [float(v) for v in r.state], "obs": [float(v) for v in r.obs],
                       "pred": [float(v) for v in r.pred], "action": [float(v) for v in r.action]}
            rec.update(step=r.step, reward=r.reward)
            recs.append(rec)
        final = self.final_state.to_list() if self.family == NAV else [float(v) for v in self.final_state]
        return {"family": self.family, "task": self.task.to_dict(), "status": self.status, "records": recs,
                "final_state": final, "path_length": self.path_length, "min_goal_dist": self.min_goal_dist}


def _state_vec(family: str, state) -> np.ndarray:
    if family == NAV:
        return np.array([state.x, state.y])
    return np.asarray(state, dtype=float)


def nav_rollout(world: World, sim_world: World, params: PolicyParams, task: NavTask, lexicon, limits: Limits,
                max_steps: int = 200, rng: np.random.Generator | None = None, iteration: int | None = None) -> Rollout:
    """Greedy policy execution in the real world, with the sim world's noise-free scan as prediction."""
    it = world._iter(iteration)
    goal = np.asarray(task.goal, dtype=float)
    pose = task.start
    prev = None
    records = []
    status = TIMEOUT
    path = 0.0
    min_d = math.inf
    for t in range(max_steps):
        d = float(np.hypot(*(pose.xy - goal)))
        min_d = min(min_d, d)
        obs = sense(world, pose, it, rng, step=t)
        pred = cast_scan(sim_world, pose.x, pose.y, pose.theta, sensor=sim_world.sensor, step=t)
        f = featurize(obs, task.instruction, prev, NAV, lexicon, world.sensor.max_range)
        a = act(params, f, NAV, greedy=True)
        if a == NavAction.STOP:
            reward = 1.0 if d <= SUCCESS_RADIUS else 0.0
            records.append(RolloutRecord(t, pose, obs, pred, a, reward))
            status = SUCCESS if reward else FAILURE
            break
        records.append(RolloutRecord(t, pose, obs, pred, a, 0.0))
        trans, rot = PRIMITIVES[a]
        if limits.abort_on_violation and (trans > limits.step_translation or abs(rot) > limits.step_rotation):
            status = SAFETY_ABORT
            break
        new_pose, collided = step_robot(world, pose, a, it)
        if not collided:
            path += trans
        pose = new_pose
        prev = a
    min_d = min(min_d, float(np.hypot(*(pose.xy - goal))))
    return Rollout(NAV, task, records, status, pose, path, world.sensor.max_range, min_goal_dist=min_d)


def manip_rollout(arm: ArmWorld, params: PolicyParams, task: ManipTask, lexicon, limits: Limits,
                  predicted_target=None, max_steps: int = 60) -> Rollout:
    """Arm execution; the observation is the true target point, the prediction the sim scene's point."""
    q = np.asarray(task.start_config, dtype=float)
    target = np.asarray(task.target, dtype=float)
    pred_target = np.asarray(predicted_target if predicted_target is not None else target, dtype=float)
    records = []
    status = TIMEOUT
    path = 0.0
    min_d = math.inf
    payload = None
    for t in range(max_steps):
        _, ee = forward_kinematics(q, arm.link_lengths)
        d = float(np.hypot(*(ee - target)))
        min_d = min(min_d, d)
        if d <= task.tolerance:
            records.append(RolloutRecord(t, q.copy(), target.copy(), pred_target.copy(), np.zeros(len(q)), 1.0))
            status = SUCCESS
            payload = task.target_mass
            break
        f = featurize(ArmObs(q, tuple(target), arm.link_lengths), task.instruction, None, MANIP, lexicon)
        delta = np.asarray(act(params, f, MANIP), dtype=float)
        records.append(RolloutRecord(t, q.copy(), target.copy(), pred_target.copy(), delta, 0.0))
        if limits.abort_on_violation and float(np.linalg.norm(delta)) > limits.joint_delta:
            status = SAFETY_ABORT
            break
        new_q, collided = step_arm(arm, q, delta)
        path += float(np.linalg.norm(new_q - q))
        q = new_q
    if status == TIMEOUT:
        _, ee = forward_kinematics(q, arm.link_lengths)
        min_d = min(min_d, float(np.hypot(*(ee - target))))
    return Rollout(MANIP, task, records, status, q, path, reach=arm.reach, min_goal_dist=min_d,
                   payload_mass=payload, link_lengths=arm.link_lengths)


# --------------------------------------------------------------------------
# task feedback
# --------------------------------------------------------------------------
@dataclass
class StepFeedback:
    step: int
    term_reward: float
    term_transition: float
    term_conf: float
    term_goal: float
    f_total: float


def combine(weights: FeedbackWeights, reward: float, transition: float, conf: float, goal: float) -> float:
    return (weights.lambda1 * reward + weights.lambda2 * transition + weights.lambda3 * conf
            + weights.lambda4 * goal)


def conf_term(obs, pred, max_range: float) -> float:
    """Mean absolute range discrepancy over rays, normalised by max_range; NO_HIT counts as max_range."""
    o = np.minimum(np.asarray(obs.ranges, dtype=float), max_range)
    p = np.minimum(np.asarray(pred.ranges, dtype=float), max_range)
    return float(np.mean(np.abs(p - o)) / max_range)


def step_terms(rollout: Rollout) -> list:
    """Raw (reward, transition, conf, goal) per record."""
    if not rollout.records:
        raise EmptyRollout("rollout has no records")
    fam = rollout.family
    goal = rollout.goal_point()
    states = [r.state for r in rollout.records] + [rollout.final_state]

    def goal_dist(state) -> float:
        if fam == NAV:
            return float(np.hypot(*(_state_vec(NAV, state) - goal)))
        _, ee = forward_kinematics(state, rollout.link_lengths)
        return float(np.hypot(*(ee - goal)))

    d0 = goal_dist(states[0])
    out = []
    n = len(rollout.records)
    for t, rec in enumerate(rollout.records):
        last = t == n - 1
        trans = 0.0 if last else float(np.linalg.norm(_state_vec(fam, states[t + 1]) - _state_vec(fam, states[t])))
        if fam == NAV:
            conf = conf_term(rec.obs, rec.pred, rollout.max_range)
        else:
            conf = float(np.linalg.norm(np.asarray(rec.pred) - np.asarray(rec.obs)) / rollout.reach)
        g = 1.0 if d0 == 0 else goal_dist(states[t]) / d0
        out.append((rec.reward, trans, conf, g))
    return out


def task_feedback(rollout: Rollout, weights: FeedbackWeights = FeedbackWeights()) -> tuple:
    """Per-step feedback, mean rollout score and the attribution step."""
    terms = step_terms(rollout)
    return feedback_from_terms(terms, weights)


def feedback_from_terms(terms: list, weights: FeedbackWeights) -> tuple:
    if not terms:
        raise EmptyRollout("rollout has no records")
    steps = [StepFeedback(t, r, tr, c, g, combine(weights, r, tr, c, g)) for t, (r, tr, c, g) in enumerate(terms)]
    score = sum(s.f_total for s in steps) / len(steps)
    blame = [weights.lambda3 * s.term_conf + weights.lambda4 * s.term_goal for s in steps]
    attribution = int(np.argmax(blame))  # earliest maximum
    return steps, score, attribution


# --------------------------------------------------------------------------
# scene feedback
# --------------------------------------------------------------------------
@dataclass
class NovelObject:
    points: list
    class_name: str
    bbox: tuple
    steps: int
    color: str | None = None


@dataclass
class SceneEvents:
    novel_objects: list = field(default_factory=list)
    dropout_estimate: float = 0.0
    directives: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "novel_objects": [{"class_name": n.class_name, "bbox": list(n.bbox), "n_points": len(n.points),
                               "n_steps": n.steps} for n in self.novel_objects],
            "dropout_estimate": self.dropout_estimate,
            "directives": list(self.directives),
        }


def scene_feedback(rollouts, scene: SceneGraph, novel_index: int = 0) -> SceneEvents:
    """Novel-object evidence and sensor dropout estimate from nav rollouts (a Rollout or a list)."""
    if isinstance(rollouts, Rollout):
        rollouts = [rollouts]
    hits = []
    dropped = considered = 0
    for k, ro in enumerate(rollouts):
        if ro.family != NAV:
            continue
        for rec in ro.records:
            obs, pred = rec.obs, rec.pred
            mr = ro.max_range
            o = np.asarray(obs.ranges, dtype=float)
            p = np.minimum(np.asarray(pred.ranges, dtype=float), mr)
            ang = np.radians((rec.state.theta + np.asarray(obs.bearings, dtype=float)) % 360.0)
            hit = np.isfinite(o)
            novel = hit & (p - np.where(hit, o, mr) > NOVEL_MARGIN)
            for i in np.flatnonzero(novel):
                point = (rec.state.x + o[i] * math.cos(ang[i]), rec.state.y + o[i] * math.sin(ang[i]))
                # timestep identity spans rollouts: (rollout index, step)
                hits.append(SemanticHit(point, obs.hit_class[i] or WALL_TOKEN, k * 100000 + rec.step,
                                        obs.hit_color[i] if obs.hit_color else None))
            predicted_hit = np.asarray(pred.ranges, dtype=float) < DROPOUT_PRED_FRACTION * mr
            considered += int(predicted_hit.sum())
            dropped += int((predicted_hit & ~hit).sum())
    events = SceneEvents()
    events.dropout_estimate = dropped / considered if considered else 0.0
    # wall-labelled evidence is clustered under one provisional label
    tagged = [h._replace(class_name="__NOVEL__") if h.class_name == WALL_TOKEN else h for h in hits]
    for group in cluster_semantic_hits(tagged, CLUSTER_RADIUS):
        n_steps = len({h.step for h in group})
        if n_steps < NOVEL_MIN_STEPS:
            continue
        votes = Counter(h.class_name for h in group)
        name = max(votes, key=lambda c: (votes[c], c == group[0].class_name))
        if name == "__NOVEL__":
            name = f"NOVEL_{novel_index}"
            novel_index += 1
        pts = np.array([h.point for h in group])
        lo, hi = pts.min(axis=0) - BBOX_PAD, pts.max(axis=0) + BBOX_PAD
        bbox = ((lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, (hi[0] - lo[0]) / 2, (hi[1] - lo[1]) / 2)
        colors = Counter(h.color for h in group if h.color is not None)
        color = max(colors, key=lambda c: (colors[c], c)) if colors else None
        events.novel_objects.append(NovelObject([h.point for h in group], name, bbox, n_steps, color))
        events.directives.append(INJECT_ASSET)
    if events.dropout_estimate > DROPOUT_TRIGGER:
        events.directives.append(RAISE_SENSOR_NOISE)
    return events


# --------------------------------------------------------------------------
# robot feedback
# --------------------------------------------------------------------------
@dataclass
class Violation:
    step: int
    kind: str
    magnitude: float
    limit: float


@dataclass
class RobotViolations:
    records: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.records)

    @property
    def gated(self) -> bool:
        return self.count > 0

    def to_dict(self) -> dict:
        return {"F_R": self.count, "gated": self.gated,
                "records": [vars(v) for v in self.records]}


def robot_feedback(rollout: Rollout, limits: Limits = Limits()) -> RobotViolations:
    out = RobotViolations()
    for rec in rollout.records:
        if rollout.family == NAV:
            trans, rot = PRIMITIVES[NavAction(rec.action)]
            if trans > limits.step_translation:
                out.records.append(Violation(rec.step, STEP_TRANSLATION, float(trans), limits.step_translation))
            if abs(rot) > limits.step_rotation:
                out.records.append(Violation(rec.step, STEP_ROTATION, float(abs(rot)), limits.step_rotation))
        else:
            mag = float(np.linalg.norm(rec.action))
            if mag > limits.joint_delta:
                out.records.append(Violation(rec.step, JOINT_DELTA, mag, limits.joint_delta))
    if rollout.family == MANIP and rollout.status == SUCCESS and rollout.payload_mass is not None:
        if rollout.payload_mass > limits.payload:
            out.records.append(Violation(rollout.records[-1].step, PAYLOAD, float(rollout.payload_mass),
                                         limits.payload))
    return out


# --------------------------------------------------------------------------
# applying feedback
# --------------------------------------------------------------------------
@dataclass
class FeedbackBundle:
    rollouts: list = field(default_factory=list)
    task_feedback: list = field(default_factory=list)  # (steps, score, attribution) per rollout
    scene_events: SceneEvents = field(default_factory=SceneEvents)
    violations: list = field(default_factory=list)  # RobotViolations per rollout


@dataclass
class FeedbackResult:
    scene: SceneGraph
    library: AssetLibrary
    sensor: SensorSpec
    dataset: Dataset
    nav_clip: dict
    manip_clip: float
    injected: list
    corrective: int
    skipped: int


def _inject_node(scene: SceneGraph, obj: NovelObject) -> AssetNode | None:
    for n in scene.nodes:
        if n.class_name == obj.class_name and math.dist(n.center, obj.bbox[:2]) < 2 * CLUSTER_RADIUS:
            return None
    w, h = scene.extent
    cx, cy, hw, hh = obj.bbox
    cx = min(max(cx, hw), w - hw)
    cy = min(max(cy, hh), h - hh)
    support = SURFACE if max(hw, hh) <= SURFACE_MAX_HALF else FLOOR
    return AssetNode(scene.next_id(), obj.class_name, obj.color, (cx, cy, hw, hh), support, INJECTED)


def apply_feedback(scene: SceneGraph, library: AssetLibrary, sensor: SensorSpec, dataset: Dataset,
                   bundle: FeedbackBundle, nav_clip: dict, manip_clip: float, iteration: int = 0,
                   lexicon=None, seed: int = 0) -> FeedbackResult:
    """Fold one iteration's feedback into scene, library, sensor model, dataset and action clip."""
    scene = scene.copy()
    library = library.copy()
    dataset = dataset.copy()
    nav_clip = dict(nav_clip)
    injected = []
    events = bundle.scene_events
    for obj, directive in zip(events.novel_objects, [d for d in events.directives if d == INJECT_ASSET]):
        node = _inject_node(scene, obj)
        if node is None:
            continue
        scene.nodes.append(node)
        injected.append(node)
        proto_mass = library.mass_of(node.class_name)
        library.add(AssetPrototype(node.class_name, node.color, node.bbox[2], node.bbox[3],
                                   proto_mass if proto_mass is not None else 0.3, INJECTED))
        if lexicon is not None:
            lexicon.add_novel(node.class_name.lower())
    if injected:
        scene.edges = relation_edges(scene.nodes)
    if RAISE_SENSOR_NOISE in events.directives:
        sensor = SensorSpec(sensor.n_rays, sensor.max_range, max(sensor.dropout_rate, events.dropout_estimate),
                            sensor.range_noise_sigma)
    # corrective supervision from attributed failure states
    sim = None
    arm = None
    corrective = []
    skipped = 0
    for k, ro in enumerate(bundle.rollouts):
        if ro.status not in (FAILURE, TIMEOUT):
            continue
        if k < len(bundle.violations) and bundle.violations[k].gated:
            continue
        _, _, attribution = bundle.task_feedback[k]
        state = ro.records[attribution].state
        try:
            if ro.family == NAV:
                if sim is None:
                    sim = scene_to_simworld(scene, sensor, library)
                task = NavTask(state, ro.task.goal, ro.task.goal_node, ro.task.instruction)
                traj = astar_nav(sim, state, ro.task.goal, NavPlanParams(), task)
            else:
                if arm is None:
                    arm = arm_world_from_scene(scene, library)
                task = ManipTask(tuple(float(v) for v in state), ro.task.target, ro.task.tolerance,
                                 ro.task.instruction, ro.task.target_node, ro.task.target_mass)
                traj = rrt_manip(arm, task, int(stream(seed, "corrective", iteration, k).integers(2 ** 31)))
        except (NoPath, PlanningTimeout, PoseInCollision, DomainError):
            skipped += 1
            continue
        corrective.append(Episode(0, ro.family, ro.task.instruction, traj, iteration, 1.0, -1))
    dataset.extend(corrective)
    # robot feedback tightens the action clip
    for viol in bundle.violations:
        for v in viol.records:
            if v.kind == JOINT_DELTA:
                manip_clip = min(manip_clip, v.limit)
            elif v.kind == STEP_TRANSLATION:
                nav_clip["translation"] = min(nav_clip["translation"], v.limit)
            elif v.kind == STEP_ROTATION:
                nav_clip["rotation"] = min(nav_clip["rotation"], v.limit)
    return FeedbackResult(scene, library, sensor, dataset, nav_clip, manip_clip, injected, len(corrective), skipped)
