"""Expert supervision: lattice A* navigation, RRT arm motion, templated instructions, datasets."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (DomainError, InsufficientFeasibleTasks, NoPath, NoValidTemplate, PlanningTimeout,
                     PoseInCollision)
from .rng import stream
from .scenegraph import ADJACENT, NEAR, SURFACE, FLOOR, SceneGraph
from .world import (DEFAULT_VOCABULARY, DISPLACEMENT, LATTICE_QUANTUM, MOTION_RESOLUTION, N_HEADINGS,
                    ROBOT_RADIUS, ArmTarget, ArmWorld, NavAction, Pose, Scan, World, arm_config_collides,
                    arm_motion_free, cast_scan, forward_kinematics, step_arm, step_robot)

NAV, MANIP = "NAV", "MANIP"
COST_UNIT = 0.05  # metres per integer cost unit
FWD_COST = np.array([5, 10], dtype=np.int64)  # FWD_25, FWD_50
TURN_DELTA = np.array([1, -1, 2, -2], dtype=np.int64)  # LEFT_15, RIGHT_15, LEFT_30, RIGHT_30
TURN_COST = np.array([1, 1, 2, 2], dtype=np.int64)
GOAL_TOL = 0.25
MANIP_TOL = 0.03
MAX_JOINT_STEP = 0.1


def _max_metres_per_unit() -> float:
    lengths = np.hypot(DISPLACEMENT[..., 0], DISPLACEMENT[..., 1]) * LATTICE_QUANTUM
    return float(np.max(lengths / FWD_COST[None, :]))


# h = (d - tol) / M never exceeds the remaining cost because one cost unit moves at most M metres
H_SCALE = 1.0 / _max_metres_per_unit()


# --------------------------------------------------------------------------
# lexicon and instructions
# --------------------------------------------------------------------------
TEMPLATE_WORDS = ("go", "to", "the", "navigate", "near", "touch", "move", "end", "effector")
LEXICON_SIZE = 64
NOVEL_SLOTS = 8

TEMPLATES = {
    0: (NAV, "go to the {color} {class}"),
    1: (NAV, "navigate to the {class} near the {class2}"),
    2: (MANIP, "touch the {color} {class}"),
    3: (MANIP, "move the end effector to the {class}"),
}
RELATIONAL = {1}


@dataclass
class Lexicon:
    words: list
    novel: list = field(default_factory=list)

    @classmethod
    def build(cls, vocabulary=DEFAULT_VOCABULARY) -> Lexicon:
        words = list(TEMPLATE_WORDS)
        for name, color, *_ in vocabulary:
            for tok in (name.lower(), str(color).lower()):
                if tok not in words:
                    words.append(tok)
        if len(words) > LEXICON_SIZE - NOVEL_SLOTS:
            raise DomainError("vocabulary too large for the lexicon")
        return cls(words, [])

    def index(self, token: str) -> int | None:
        if token in self.words:
            return self.words.index(token)
        if token in self.novel:
            return LEXICON_SIZE - NOVEL_SLOTS + self.novel.index(token)
        return None

    def add_novel(self, token: str) -> bool:
        token = token.lower()
        if self.index(token) is not None:
            return False
        if len(self.novel) >= NOVEL_SLOTS:
            return False
        self.novel.append(token)
        return True

    def to_dict(self) -> dict:
        return {"words": list(self.words), "novel": list(self.novel)}

    @classmethod
    def from_dict(cls, d: dict) -> Lexicon:
        return cls(list(d["words"]), list(d["novel"]))


@dataclass
class Instruction:
    tokens: list
    template_id: int
    slots: dict  # slot -> node id

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "template_id": self.template_id,
                "slots": {k: v for k, v in sorted(self.slots.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> Instruction:
        return cls(list(d["tokens"]), int(d["template_id"]), dict(d["slots"]))


def _relational_partners(scene: SceneGraph, node_id: int) -> list:
    return sorted({e.dst for e in scene.edges if e.src == node_id and e.relation in (NEAR, ADJACENT)})


def gen_instruction(scene: SceneGraph, task_family: str, target_node: int, rng: np.random.Generator,
                    template_id: int | None = None) -> Instruction:
    """Fill a family template from node attributes.

    With ``template_id`` given, a relational template without a NEAR/ADJACENT
    partner raises NoValidTemplate; otherwise such templates are simply not
    offered.
    """
    node = scene.node(target_node)
    partners = _relational_partners(scene, target_node)
    if template_id is not None:
        if TEMPLATES[template_id][0] != task_family:
            raise NoValidTemplate(f"template {template_id} is not a {task_family} template")
        if template_id in RELATIONAL and not partners:
            raise NoValidTemplate(f"node {target_node} has no NEAR/ADJACENT partner")
        tid = template_id
    else:
        options = [t for t, (fam, _) in sorted(TEMPLATES.items())
                   if fam == task_family and (t not in RELATIONAL or partners)]
        tid = options[int(rng.integers(len(options)))]
    slots = {"class": target_node}
    pattern = TEMPLATES[tid][1]
    if "{class2}" in pattern:
        other = partners[int(rng.integers(len(partners)))]
        slots["class2"] = other
        pattern = pattern.replace("{class2}", scene.node(other).class_name.lower())
    color = (node.color or "").lower()
    if color and color != "none":
        pattern = pattern.replace("{color}", color)
    else:
        pattern = pattern.replace("{color} ", "")
    text = pattern.replace("{class}", node.class_name.lower())
    return Instruction(text.split(), tid, slots)


# --------------------------------------------------------------------------
# navigation
# --------------------------------------------------------------------------
@dataclass
class NavTask:
    start: Pose
    goal: tuple
    goal_node: int | None = None
    instruction: Instruction | None = None

    def to_dict(self) -> dict:
        return {"start": self.start.to_list(), "goal": list(self.goal), "goal_node": self.goal_node,
                "instruction": None if self.instruction is None else self.instruction.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> NavTask:
        ins = d.get("instruction")
        return cls(Pose.from_list(d["start"]), tuple(d["goal"]), d.get("goal_node"),
                   None if ins is None else Instruction.from_dict(ins))


@dataclass
class NavStep:
    pose: Pose
    scan: Scan | None
    action: NavAction


@dataclass
class NavTrajectory:
    task: NavTask
    steps: list
    cost_units: int

    @property
    def total_cost(self) -> float:
        return self.cost_units * COST_UNIT

    @property
    def actions(self) -> list:
        return [s.action for s in self.steps]

    @property
    def forward_distance(self) -> float:
        """Nominal translation of the forward primitives (the SPL path-length reference)."""
        return sum(0.25 if s.action == NavAction.FWD_25 else 0.5 if s.action == NavAction.FWD_50 else 0.0
                   for s in self.steps)

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "cost": self.total_cost,
            "cost_units": self.cost_units,
            "steps": [{"pose": s.pose.to_list(), "action": s.action.name,
                       "scan": None if s.scan is None else s.scan.to_dict()} for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> NavTrajectory:
        steps = [NavStep(Pose.from_list(s["pose"]), None if s["scan"] is None else Scan.from_dict(s["scan"]),
                         NavAction[s["action"]]) for s in d["steps"]]
        return cls(NavTask.from_dict(d["task"]), steps, int(d["cost_units"]))


@dataclass
class NavPlanParams:
    goal_tol: float = GOAL_TOL
    use_heuristic: bool = True
    record_scans: bool = True
    iteration: int | None = None


@dataclass
class SearchResult:
    actions: list
    cost_units: int
    expanded: int


def lattice_search(world: World, start: Pose, goal: tuple, goal_tol: float = GOAL_TOL, use_heuristic: bool = True,
                   iteration: int | None = None) -> SearchResult:
    """Optimal primitive sequence (STOP excluded) from ``start`` to within ``goal_tol`` of ``goal``."""
    it = world._iter(iteration)
    blocked, clear = world.blocked(it), world.clearance(it)
    goal_state, parent, parent_act, g, expanded = _kernels.lattice_astar(
        blocked, clear, float(start.x), float(start.y), start.heading_index, float(goal[0]), float(goal[1]),
        float(goal_tol), DISPLACEMENT, FWD_COST, TURN_DELTA, TURN_COST, H_SCALE, ROBOT_RADIUS, world.cell_size,
        LATTICE_QUANTUM, MOTION_RESOLUTION, use_heuristic)
    if goal_state < 0:
        raise NoPath(f"no lattice path from {start} to {goal}")
    actions = []
    s = goal_state
    while parent[s] >= 0:
        actions.append(NavAction(int(parent_act[s])))
        s = parent[s]
    actions.reverse()
    return SearchResult(actions, int(g[goal_state]), int(expanded))


def astar_nav(world: World, start: Pose, goal: tuple, params: NavPlanParams | None = None,
              task: NavTask | None = None) -> NavTrajectory:
    params = params or NavPlanParams()
    it = world._iter(params.iteration)
    if not world.in_bounds(start.x, start.y) or world.robot_collides(start.x, start.y, it):
        raise PoseInCollision(f"start {start} is in collision")
    if not (0 <= goal[0] <= world.width_m and 0 <= goal[1] <= world.height_m):
        raise DomainError(f"goal {goal} outside the world extent")
    result = lattice_search(world, start, goal, params.goal_tol, params.use_heuristic, it)
    task = task or NavTask(start, tuple(goal))
    steps = []
    pose = start
    for a in result.actions + [NavAction.STOP]:
        scan = cast_scan(world, pose.x, pose.y, pose.theta, it, step=len(steps)) if params.record_scans else None
        steps.append(NavStep(pose, scan, a))
        pose, collided = step_robot(world, pose, a, it)
        if collided:  # cannot happen: the search and the stepper share the collision kernel
            raise NoPath("planned path collides on replay")
    return NavTrajectory(task, steps, result.cost_units)


def replay_nav(world: World, traj: NavTrajectory, iteration: int | None = None) -> tuple:
    """Re-execute actions; returns (final pose, any collision, poses match the recorded ones)."""
    pose = traj.task.start
    collided_any = False
    consistent = True
    for step in traj.steps:
        consistent &= step.pose == pose
        pose, collided = step_robot(world, pose, step.action, iteration)
        collided_any |= collided
    return pose, collided_any, consistent


# --------------------------------------------------------------------------
# manipulation
# --------------------------------------------------------------------------
@dataclass
class ManipTask:
    start_config: tuple
    target: tuple
    tolerance: float = MANIP_TOL
    instruction: Instruction | None = None
    target_node: int | None = None
    target_mass: float = 0.0

    def to_dict(self) -> dict:
        return {"start_config": [float(v) for v in self.start_config], "target": [float(v) for v in self.target],
                "tolerance": self.tolerance, "target_node": self.target_node, "target_mass": self.target_mass,
                "instruction": None if self.instruction is None else self.instruction.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> ManipTask:
        ins = d.get("instruction")
        return cls(tuple(d["start_config"]), tuple(d["target"]), float(d["tolerance"]),
                   None if ins is None else Instruction.from_dict(ins), d.get("target_node"),
                   float(d.get("target_mass", 0.0)))


@dataclass
class ManipTrajectory:
    task: ManipTask
    configs: list  # config before each delta
    deltas: list
    final_config: np.ndarray

    def ee_error(self, link_lengths) -> float:
        _, ee = forward_kinematics(self.final_config, link_lengths)
        return float(np.hypot(*(ee - np.asarray(self.task.target))))

    @property
    def path_length(self) -> float:
        return float(sum(np.linalg.norm(d) for d in self.deltas))

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "steps": [{"config": [float(v) for v in c], "delta": [float(v) for v in d]}
                      for c, d in zip(self.configs, self.deltas)],
            "final_config": [float(v) for v in self.final_config],
            "cost": self.path_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ManipTrajectory:
        return cls(ManipTask.from_dict(d["task"]), [np.asarray(s["config"]) for s in d["steps"]],
                   [np.asarray(s["delta"]) for s in d["steps"]], np.asarray(d["final_config"]))


@dataclass
class RRTParams:
    goal_bias: float = 0.1
    step: float = MAX_JOINT_STEP
    max_nodes: int = 20000
    shortcut_attempts: int = 50
    n_goal_configs: int = 16


def ik_candidates(arm: ArmWorld, target, n: int, rng: np.random.Generator) -> list:
    """Collision-free configs placing the end effector on ``target``.

    The last link's world angle is sampled; the first two joints then follow
    from closed-form two-link inverse kinematics, both elbow branches.
    """
    l1, l2, l3 = arm.link_lengths
    tx, ty = target
    out = []
    for phi in rng.uniform(-math.pi, math.pi, n):
        wx, wy = tx - l3 * math.cos(phi), ty - l3 * math.sin(phi)
        d2 = wx * wx + wy * wy
        c2 = (d2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
        if abs(c2) > 1:
            continue
        for sign in (1.0, -1.0):
            q2 = sign * math.acos(c2)
            q1 = math.atan2(wy, wx) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
            q3 = phi - q1 - q2
            q = np.array([q1, q2, q3])
            q = (q + math.pi) % (2 * math.pi) - math.pi
            if np.all(np.abs(q) <= arm.joint_limit) and not arm_config_collides(arm, q):
                out.append(q)
    return out


def _ee_dist(arm: ArmWorld, q, target) -> float:
    _, ee = forward_kinematics(q, arm.link_lengths)
    return float(math.hypot(ee[0] - target[0], ee[1] - target[1]))


def _discretize(path: list, step: float) -> list:
    out = [np.asarray(path[0], dtype=float)]
    for a, b in zip(path[:-1], path[1:]):
        n = max(1, int(math.ceil(float(np.linalg.norm(b - a)) / step - 1e-12)))
        for k in range(1, n + 1):
            out.append(a + (b - a) * (k / n))
    return out


def _replay_arm(arm: ArmWorld, waypoints: list):
    """Turn waypoints into deltas and execute them; None if any step collides."""
    q = np.asarray(waypoints[0], dtype=float).copy()
    configs, deltas = [], []
    for w in waypoints[1:]:
        d = np.asarray(w) - q
        nxt, collided = step_arm(arm, q, d)
        if collided:
            return None
        configs.append(q)
        deltas.append(d)
        q = nxt
    return configs, deltas, q


def rrt_manip(arm: ArmWorld, task: ManipTask, seed: int, params: RRTParams | None = None) -> ManipTrajectory:
    params = params or RRTParams()
    rng = stream(seed, "rrt")
    q0 = np.asarray(task.start_config, dtype=float)
    target = tuple(task.target)
    if arm_config_collides(arm, q0):
        raise PoseInCollision("start configuration is in collision")
    if math.hypot(*target) > arm.reach:
        raise DomainError("target beyond the arm's reach")
    if _ee_dist(arm, q0, target) <= task.tolerance:
        return ManipTrajectory(task, [], [], q0.copy())
    goals = ik_candidates(arm, target, params.n_goal_configs, rng)
    dim = len(q0)
    nodes = np.zeros((params.max_nodes, dim))
    parent = np.full(params.max_nodes, -1, dtype=np.int64)
    nodes[0] = q0
    n = 1
    found = -1
    lim = arm.joint_limit
    while n < params.max_nodes:
        if goals and rng.random() < params.goal_bias:
            sample = goals[int(rng.integers(len(goals)))]
        else:
            sample = rng.uniform(-lim, lim, dim)
        d2 = np.sum((nodes[:n] - sample) ** 2, axis=1)
        near = int(np.argmin(d2))
        diff = sample - nodes[near]
        dist = math.sqrt(float(d2[near]))
        if dist == 0:
            continue
        new = nodes[near] + diff * min(1.0, params.step / dist)
        if not arm_motion_free(arm, nodes[near], new):
            continue
        nodes[n] = new
        parent[n] = near
        n += 1
        if _ee_dist(arm, new, target) <= task.tolerance:
            found = n - 1
            break
    if found < 0:
        raise PlanningTimeout(f"RRT exhausted {params.max_nodes} nodes")
    path = []
    k = found
    while k >= 0:
        path.append(nodes[k].copy())
        k = parent[k]
    path.reverse()
    raw = list(path)
    for _ in range(params.shortcut_attempts):
        if len(path) < 3:
            break
        i, j = sorted(rng.choice(len(path), 2, replace=False))
        if j - i < 2:
            continue
        if arm_motion_free(arm, path[i], path[j]):
            path = path[:i + 1] + path[j:]
    for candidate in (path, raw):
        replay = _replay_arm(arm, _discretize(candidate, params.step))
        if replay is not None and _ee_dist(arm, replay[2], target) <= task.tolerance:
            configs, deltas, final = replay
            return ManipTrajectory(task, configs, deltas, final)
    raise PlanningTimeout("no discretised path survived replay")


def replay_manip(arm: ArmWorld, traj: ManipTrajectory) -> tuple:
    """(final config, any collision, max delta norm) from executing the deltas."""
    q = np.asarray(traj.task.start_config, dtype=float)
    collided_any = False
    max_norm = 0.0
    for d in traj.deltas:
        max_norm = max(max_norm, float(np.linalg.norm(d)))
        q, collided = step_arm(arm, q, d)
        collided_any |= collided
    return q, collided_any, max_norm


def easy_manip_instance(seed: int, link_lengths=(0.3, 0.25, 0.2)) -> tuple:
    """One obstacle disc and a reachable target away from it, start at the zero config."""
    rng = stream(seed, "easy-manip")
    reach = sum(link_lengths)
    while True:
        r_obs = rng.uniform(0.25, 0.6)
        a_obs = rng.uniform(-math.pi, math.pi)
        obstacle = (r_obs * math.cos(a_obs), r_obs * math.sin(a_obs), float(rng.uniform(0.04, 0.08)))
        arm = ArmWorld(link_lengths, obstacles=[obstacle])
        if arm_config_collides(arm, np.zeros(3)):
            continue
        r_t = rng.uniform(0.25, 0.9 * reach)
        a_t = rng.uniform(-math.pi, math.pi)
        target = (r_t * math.cos(a_t), r_t * math.sin(a_t))
        if math.dist(target, obstacle[:2]) < obstacle[2] + 0.1:
            continue
        return arm, ManipTask((0.0, 0.0, 0.0), target)


# --------------------------------------------------------------------------
# scene -> arm mapping
# --------------------------------------------------------------------------
ARM_R0, ARM_R1 = 0.3, 0.35
ARM_SPAN = math.radians(270.0)
ARM_OBSTACLE_RADIUS = 0.04


def arm_point(center, extent) -> tuple:
    """Map a scene position to the arm plane: radius grows with y, angle sweeps with x."""
    w, h = extent
    r = ARM_R0 + ARM_R1 * (center[1] / h)
    a = -ARM_SPAN / 2 + ARM_SPAN * (center[0] / w)
    return (r * math.cos(a), r * math.sin(a))


def arm_world_from_scene(scene: SceneGraph, library=None) -> ArmWorld:
    """SURFACE nodes become targets and FLOOR nodes small obstacles (kept clear of targets and the base)."""
    targets = []
    for n in scene.nodes:
        if n.support_height != SURFACE:
            continue
        mass = n.mass if n.mass is not None else (library.mass_of(n.class_name) if library else None)
        targets.append(ArmTarget(arm_point(n.center, scene.extent), n.class_name, n.color,
                                 float(mass if mass is not None else 0.3), n.id))
    obstacles = []
    for n in scene.nodes:
        if n.support_height != FLOOR:
            continue
        p = arm_point(n.center, scene.extent)
        if math.hypot(*p) < 0.2 or any(math.dist(p, t.point) < 0.12 for t in targets):
            continue
        obstacles.append((p[0], p[1], ARM_OBSTACLE_RADIUS))
    return ArmWorld(obstacles=obstacles, targets=targets)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------
@dataclass
class Episode:
    episode_id: int
    task_family: str
    instruction: Instruction
    trajectory: object  # NavTrajectory or ManipTrajectory
    source_iteration: int = 0
    weight: float = 1.0
    world_index: int = 0

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "task_family": self.task_family,
            "instruction": self.instruction.tokens,
            "template_id": self.instruction.template_id,
            "slots": {k: v for k, v in sorted(self.instruction.slots.items())},
            "trajectory": self.trajectory.to_dict(),
            "source_iteration": self.source_iteration,
            "weight": self.weight,
            "world_index": self.world_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Episode:
        ins = Instruction(list(d["instruction"]), int(d["template_id"]), dict(d["slots"]))
        traj = (NavTrajectory if d["task_family"] == NAV else ManipTrajectory).from_dict(d["trajectory"])
        return cls(int(d["episode_id"]), d["task_family"], ins, traj, int(d["source_iteration"]),
                   float(d["weight"]), int(d.get("world_index", 0)))


@dataclass
class Dataset:
    episodes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.episodes)

    def family(self, fam: str) -> list:
        return [e for e in self.episodes if e.task_family == fam]

    def extend(self, episodes) -> None:
        base = max((e.episode_id for e in self.episodes), default=-1) + 1
        for k, e in enumerate(episodes):
            e.episode_id = base + k
            self.episodes.append(e)

    def copy(self) -> Dataset:
        return Dataset(list(self.episodes))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.episodes)

    @classmethod
    def from_jsonl(cls, text: str) -> Dataset:
        return cls([Episode.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()])


@dataclass
class DatasetParams:
    min_start_goal: float = 1.0
    resample_factor: int = 10
    record_scans: bool = True


def nearest_free_goal(world: World, point) -> tuple:
    """Centre of the robot-free cell nearest ``point``."""
    rows, cols = np.nonzero(world.clearance())
    if len(rows) == 0:
        raise NoPath("world has no robot-free cell")
    xs, ys = (cols + 0.5) * world.cell_size, (rows + 0.5) * world.cell_size
    d = (xs - point[0]) ** 2 + (ys - point[1]) ** 2
    k = int(np.argmin(d))
    return (float(xs[k]), float(ys[k]))


def sample_start(world: World, rng: np.random.Generator) -> Pose:
    rows, cols = np.nonzero(world.clearance())
    k = int(rng.integers(len(rows)))
    x, y = world.cell_center(int(rows[k]), int(cols[k]))
    return Pose(x, y, int(rng.integers(N_HEADINGS)) * 15)


def sample_nav_task(world: World, scene: SceneGraph, rng: np.random.Generator, min_dist: float = 1.0) -> NavTask:
    if not scene.nodes:
        raise InsufficientFeasibleTasks("scene has no nodes to navigate to")
    node = scene.nodes[int(rng.integers(len(scene.nodes)))]
    goal = nearest_free_goal(world, node.center)
    for _ in range(100):
        start = sample_start(world, rng)
        if math.dist(start.xy, goal) > min_dist:
            break
    ins = gen_instruction(scene, NAV, node.id, rng)
    return NavTask(start, goal, node.id, ins)


def sample_manip_task(arm: ArmWorld, scene: SceneGraph, rng: np.random.Generator) -> ManipTask:
    reachable = [t for t in arm.targets if math.hypot(*t.point) <= arm.reach]
    if not reachable:
        raise InsufficientFeasibleTasks("no reachable arm targets")
    t = reachable[int(rng.integers(len(reachable)))]
    for _ in range(100):
        q = rng.uniform(-1.0, 1.0, 3)
        if not arm_config_collides(arm, q):
            break
    ins = gen_instruction(scene, MANIP, t.node_id, rng)
    return ManipTask(tuple(float(v) for v in q), t.point, MANIP_TOL, ins, t.node_id, t.mass)


def build_dataset(sim_worlds: list, n_nav: int, n_manip: int, seed: int, source_iteration: int = 0,
                  params: DatasetParams | None = None, library=None) -> Dataset:
    """Plan ``n_nav`` + ``n_manip`` expert episodes round-robin over ``(World, SceneGraph)`` pairs."""
    params = params or DatasetParams()
    if not sim_worlds and (n_nav or n_manip):
        raise DomainError("build_dataset needs at least one sim world")
    episodes = []
    arms = [arm_world_from_scene(scene, library) for _, scene in sim_worlds]
    nav_params = NavPlanParams(record_scans=params.record_scans)
    for fam, count in ((NAV, n_nav), (MANIP, n_manip)):
        made = attempts = 0
        budget = params.resample_factor * count
        while made < count:
            if attempts >= budget:
                raise InsufficientFeasibleTasks(f"only {made}/{count} feasible {fam} tasks after {attempts} attempts")
            k = attempts % len(sim_worlds)
            world, scene = sim_worlds[k]
            rng = stream(seed, "dataset", fam, made, attempts)
            attempts += 1
            try:
                if fam == NAV:
                    task = sample_nav_task(world, scene, rng, params.min_start_goal)
                    traj = astar_nav(world, task.start, task.goal, nav_params, task)
                else:
                    task = sample_manip_task(arms[k], scene, rng)
                    traj = rrt_manip(arms[k], task, int(rng.integers(2 ** 31)))
            except (NoPath, PlanningTimeout, InsufficientFeasibleTasks, PoseInCollision, NoValidTemplate):
                continue
            episodes.append(Episode(len(episodes), fam, task.instruction, traj, source_iteration, 1.0, k))
            made += 1
    return Dataset(episodes)
