"""The explore / reconstruct / train / deploy / feed back loop, metrics and ablations."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DomainError, LifeloopError, NoPath, StageError
from .explore import ExploreParams, explore
from .feedback import (SUCCESS, SUCCESS_RADIUS, FeedbackBundle, FeedbackWeights, Limits, apply_feedback,
                       manip_rollout, nav_rollout, robot_feedback, scene_feedback, task_feedback)
from .planners import (MANIP, NAV, Dataset, Lexicon, ManipTask, NavTask, arm_world_from_scene, build_dataset,
                       gen_instruction, lattice_search, nearest_free_goal, sample_start)
from .policy import (DEFAULT_MANIP_CLIP, DEFAULT_NAV_CLIP, SEPARATE, PolicyParams, TrainConfig, train)
from .rng import derive_seed, stream
from .scenegraph import (AssetLibrary, AssetNode, CLUSTER_RADIUS, SceneGraph, augment_scene,
                         reconstruct_scene, relation_edges, retrieve_scene, scene_to_simworld, world_to_scene)
from .world import (DynamicsEvent, EventKind, Pose, SensorSpec, World, WorldSpec, apply_dynamics, arm_config_collides,
                    generate_world)

STATIC_DATASET = "STATIC_DATASET"
RETRIEVAL_SCENES = "RETRIEVAL_SCENES"
SEPARATE_TRAINING = "SEPARATE_TRAINING"
SPARSE_FEEDBACK = "SPARSE_FEEDBACK"
ABLATIONS = (STATIC_DATASET, RETRIEVAL_SCENES, SEPARATE_TRAINING, SPARSE_FEEDBACK)
METRIC_COLUMNS = ("iteration", "NE", "OS", "SR", "SPL", "manip_SR", "f_score_mean")


def default_world() -> dict:
    """24x24 two-room world whose fifth object appears at iteration 2; the seed follows the master seed."""
    d = WorldSpec(24, 24, n_rooms=2, object_count=5,
                  dynamics=[DynamicsEvent(2, EventKind.OBJECT_APPEAR, object_id=4)]).to_dict()
    del d["seed"]
    return d


@dataclass
class LifecycleConfig:
    world: dict = field(default_factory=default_world)
    iterations: int = 5
    explore_budget: int = 800
    force_explore: bool = False
    n_variants: int = 3
    n_nav: int = 60
    n_manip: int = 10
    train: dict = field(default_factory=lambda: {"epochs": 20, "learning_rate": 0.2})
    weights: dict = field(default_factory=dict)
    limits: dict = field(default_factory=dict)
    eval_nav: int = 40
    eval_manip: int = 10
    eval_max_steps: int = 80
    manip_max_steps: int = 60
    ablation: list = field(default_factory=list)
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        bad = [a for a in self.ablation if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation flags {bad}")
        if self.n_variants < 1:
            raise ConfigError("n_variants must be >= 1")
        if self.eval_nav < 1:
            raise ConfigError("evaluation needs at least one navigation task")
        try:
            self.world_spec()
            self.train_config(0)
            FeedbackWeights(**self.weights)
            Limits(**self.limits)
        except (TypeError, ValueError, LifeloopError) as exc:
            raise ConfigError(str(exc)) from exc

    def world_spec(self) -> WorldSpec:
        d = dict(self.world)
        d.setdefault("seed", self.seed)
        return WorldSpec.from_dict(d)

    def train_config(self, iteration: int) -> TrainConfig:
        d = dict(self.train)
        d["seed"] = derive_seed(self.seed, "train", iteration)
        if SEPARATE_TRAINING in self.ablation:
            d["mode"] = SEPARATE
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> LifecycleConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> LifecycleConfig:
        try:
            with open(path) as f:
                d = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------
@dataclass
class Metrics:
    NE: float
    OS: float
    SR: float
    SPL: float
    manip_SR: float
    n_nav: int
    n_manip: int

    def to_dict(self) -> dict:
        return asdict(self)


def spl_term(success: bool, shortest: float, path: float) -> float:
    if not success:
        return 0.0
    denom = max(path, shortest)
    return 1.0 if denom == 0 else shortest / denom


def nav_metrics(rollouts: list, shortest: list) -> dict:
    """NE, OS, SR and SPL means over nav rollouts with their oracle path lengths."""
    ne, os_, sr, spl = [], [], [], []
    for ro, L in zip(rollouts, shortest):
        goal = np.asarray(ro.task.goal)
        final = float(np.hypot(*(ro.final_state.xy - goal)))
        s = ro.status == SUCCESS
        ne.append(final)
        sr.append(float(s))
        os_.append(float(ro.min_goal_dist <= SUCCESS_RADIUS))
        spl.append(spl_term(s, L, ro.path_length))
    n = len(rollouts)
    return {"NE": float(np.mean(ne)) if n else 0.0, "OS": float(np.mean(os_)) if n else 0.0,
            "SR": float(np.mean(sr)) if n else 0.0, "SPL": float(np.mean(spl)) if n else 0.0}


def oracle_forward_length(world: World, task: NavTask, iteration: int | None = None) -> float:
    """Forward-distance component of the lattice-optimal path (0 if none exists)."""
    try:
        res = lattice_search(world, task.start, task.goal, iteration=iteration)
    except NoPath:
        return 0.0
    return sum(0.25 if int(a) == 1 else 0.5 if int(a) == 2 else 0.0 for a in res.actions)


@dataclass
class EvalTasks:
    nav: list
    manip: list

    def to_dict(self) -> dict:
        return {"nav": [t.to_dict() for t in self.nav], "manip": [t.to_dict() for t in self.manip]}

    @classmethod
    def from_dict(cls, d: dict) -> EvalTasks:
        return cls([NavTask.from_dict(t) for t in d["nav"]], [ManipTask.from_dict(t) for t in d["manip"]])


def sample_eval_tasks(real: World, n_nav: int, n_manip: int, seed: int, horizon: int) -> EvalTasks:
    """Fixed evaluation set drawn once from the real world.

    Navigation goals cover every object that is active by ``horizon``; arm
    targets come from objects present at the start.
    """
    full = apply_dynamics(real, horizon)
    truth = world_to_scene(full, horizon)
    nav = []
    k = 0
    while len(nav) < n_nav:
        rng = stream(seed, "eval-nav", k)
        k += 1
        if k > 50 * n_nav:
            raise StageError("evaluate", 0, "could not sample evaluation tasks")
        node = truth.nodes[int(rng.integers(len(truth.nodes)))]
        goal = nearest_free_goal(full, node.center)
        start = sample_start(real, rng)
        if math.dist(start.xy, goal) <= 1.0 or full.robot_collides(start.x, start.y, horizon):
            continue
        try:
            lattice_search(full, start, goal, iteration=horizon)
            lattice_search(real, start, goal, iteration=0)
        except NoPath:
            continue
        nav.append(NavTask(start, goal, node.id, gen_instruction(truth, NAV, node.id, rng)))
    initial = world_to_scene(real, 0)
    arm = arm_world_from_scene(initial)
    manip = []
    k = 0
    while len(manip) < n_manip and arm.targets:
        rng = stream(seed, "eval-manip", k)
        k += 1
        t = arm.targets[int(rng.integers(len(arm.targets)))]
        q = rng.uniform(-1.0, 1.0, 3)
        if arm_config_collides(arm, q):
            continue
        manip.append(ManipTask(tuple(float(v) for v in q), t.point, 0.03,
                               gen_instruction(initial, MANIP, t.node_id, rng), t.node_id, t.mass))
    return EvalTasks(nav, manip)


# --------------------------------------------------------------------------
# iteration state
# --------------------------------------------------------------------------
@dataclass
class IterationState:
    iteration: int
    start: Pose
    tasks: EvalTasks
    lexicon: Lexicon
    library: AssetLibrary
    sensor: SensorSpec
    dataset: Dataset = field(default_factory=Dataset)
    scene: SceneGraph | None = None
    params: PolicyParams | None = None
    nav_clip: dict = field(default_factory=lambda: dict(DEFAULT_NAV_CLIP))
    manip_clip: float = DEFAULT_MANIP_CLIP
    static_dataset: Dataset | None = None
    reexplore: bool = True
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "start": self.start.to_list(),
            "tasks": self.tasks.to_dict(),
            "lexicon": self.lexicon.to_dict(),
            "library": self.library.to_dict(),
            "sensor": asdict(self.sensor),
            "dataset": self.dataset.to_jsonl(),
            "scene": None if self.scene is None else self.scene.to_dict(),
            "params": None if self.params is None else self.params.to_dict(),
            "nav_clip": self.nav_clip,
            "manip_clip": self.manip_clip,
            "static_dataset": None if self.static_dataset is None else self.static_dataset.to_jsonl(),
            "reexplore": self.reexplore,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> IterationState:
        return cls(
            int(d["iteration"]), Pose.from_list(d["start"]), EvalTasks.from_dict(d["tasks"]),
            Lexicon.from_dict(d["lexicon"]), AssetLibrary.from_dict(d["library"]), SensorSpec(**d["sensor"]),
            Dataset.from_jsonl(d["dataset"]), None if d["scene"] is None else SceneGraph.from_dict(d["scene"]),
            None if d["params"] is None else PolicyParams.from_dict(d["params"]), dict(d["nav_clip"]),
            float(d["manip_clip"]),
            None if d["static_dataset"] is None else Dataset.from_jsonl(d["static_dataset"]),
            bool(d["reexplore"]), list(d["history"]))


def exploration_start(world: World, seed: int) -> Pose:
    start = sample_start(world, stream(seed, "explore-start"))
    return Pose(start.x, start.y, 0)


def initial_state(config: LifecycleConfig, real: World) -> IterationState:
    spec = config.world_spec()
    start = exploration_start(real, config.seed)
    tasks = sample_eval_tasks(real, config.eval_nav, config.eval_manip, config.seed, config.iterations - 1)
    return IterationState(0, start, tasks, Lexicon.build(spec.class_vocabulary),
                          AssetLibrary.from_vocabulary(spec.class_vocabulary), real.sensor)


def _merge_scene(new: SceneGraph, old: SceneGraph | None) -> SceneGraph:
    """Previous nodes stay; freshly reconstructed nodes are appended when no same-class node lies nearby."""
    if old is None:
        return new
    nodes = [AssetNode.from_dict(n.to_dict()) for n in old.nodes]
    for n in new.nodes:
        if any(m.class_name == n.class_name and math.dist(m.center, n.center) < 2 * CLUSTER_RADIUS for m in nodes):
            continue
        nodes.append(AssetNode(max((m.id for m in nodes), default=-1) + 1, n.class_name, n.color, n.bbox,
                               n.support_height, n.provenance, n.mass))
    return SceneGraph(nodes, relation_edges(nodes), new.walls, new.cell_size)


def _free_start(world: World, start: Pose, iteration: int) -> Pose:
    if not world.robot_collides(start.x, start.y, iteration):
        return start
    rows, cols = np.nonzero(world.clearance(iteration))
    xs, ys = (cols + 0.5) * world.cell_size, (rows + 0.5) * world.cell_size
    k = int(np.argmin((xs - start.x) ** 2 + (ys - start.y) ** 2))
    return Pose(float(xs[k]), float(ys[k]), start.theta)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True)


class _Writer:
    """Single-writer artifact persistence; a no-op without an output directory."""

    def __init__(self, root: str | None):
        self.root = root

    def write(self, rel: str, text: str):
        if self.root is None:
            return
        path = os.path.join(self.root, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "w") as f:
            f.write(text)


def evaluate(world: World, params: PolicyParams, tasks: EvalTasks, limits: Limits, lexicon: Lexicon,
             sim_world: World | None = None, sim_arm=None, iteration: int | None = None, seed: int = 0,
             max_steps: int = 80, manip_max_steps: int = 60) -> tuple:
    """Greedy rollouts of every task in ``world``; returns (Metrics, nav rollouts, manip rollouts).

    ``sim_world`` / ``sim_arm`` supply the predictions used by feedback; they default to the
    real world itself (perfect prediction).
    """
    if not tasks.nav and not tasks.manip:
        raise DomainError("evaluate needs at least one task")
    it = world._iter(iteration)
    sim_world = sim_world if sim_world is not None else world
    nav_rollouts = []
    for k, task in enumerate(tasks.nav):
        t = NavTask(_free_start(world, task.start, it), task.goal, task.goal_node, task.instruction)
        nav_rollouts.append(nav_rollout(world, sim_world, params, t, lexicon, limits, max_steps,
                                        stream(seed, "deploy", it, k), it))
    real_arm = arm_world_from_scene(world_to_scene(world, it))
    manip_rollouts = []
    for task in tasks.manip:
        predicted = _predicted_target(task, real_arm, sim_arm) if sim_arm is not None else None
        manip_rollouts.append(manip_rollout(real_arm, params, task, lexicon, limits, predicted, manip_max_steps))
    shortest = [oracle_forward_length(world, ro.task, it) for ro in nav_rollouts]
    m = nav_metrics(nav_rollouts, shortest)
    manip_sr = float(np.mean([ro.status == SUCCESS for ro in manip_rollouts])) if manip_rollouts else 0.0
    metrics = Metrics(m["NE"], m["OS"], m["SR"], m["SPL"], manip_sr, len(nav_rollouts), len(manip_rollouts))
    return metrics, nav_rollouts, manip_rollouts


def gather_feedback(nav_rollouts: list, manip_rollouts: list, scene: SceneGraph, library: AssetLibrary,
                    weights: FeedbackWeights, limits: Limits) -> FeedbackBundle:
    rollouts = nav_rollouts + manip_rollouts
    tf = [task_feedback(r, weights) for r in rollouts]
    viol = [robot_feedback(r, limits) for r in rollouts]
    novel_index = sum(1 for p in library.prototypes if p.class_name.startswith("NOVEL_"))
    events = scene_feedback(nav_rollouts, scene, novel_index)
    return FeedbackBundle(rollouts, tf, events, viol)


def feedback_summary(bundle: FeedbackBundle, weights: FeedbackWeights) -> dict:
    tf = bundle.task_feedback
    return {
        "weights": asdict(weights),
        "scores": [s for _, s, _ in tf],
        "attribution": [a for _, _, a in tf],
        "steps": [[asdict(s) for s in steps] for steps, _, _ in tf],
        "scene_events": bundle.scene_events.to_dict(),
        "violations": [v.to_dict() for v in bundle.violations],
    }


def run_iteration(state: IterationState, real_world: World, config: LifecycleConfig,
                  writer: _Writer | None = None) -> IterationState:
    writer = writer or _Writer(None)
    i = state.iteration
    abl = set(config.ablation)
    sparse = SPARSE_FEEDBACK in abl
    d = f"iter_{i:02d}"

    def stage(name, fn):
        try:
            return fn()
        except StageError:
            raise
        except LifeloopError as exc:
            raise StageError(name, i, exc) from exc

    real = stage("dynamics", lambda: apply_dynamics(real_world, i))

    # explore + reconstruct
    scene = state.scene
    if scene is None or state.reexplore or config.force_explore:
        start = _free_start(real, state.start, i)
        log = stage("explore", lambda: explore(real, start, config.explore_budget,
                                               ExploreParams(seed=derive_seed(config.seed, "explore", i),
                                                             iteration=i)))
        writer.write(f"{d}/exploration_log.jsonl", log.to_jsonl())
        writer.write(f"{d}/belief.json", log.belief_json())
        rebuilt = stage("reconstruct", lambda: reconstruct_scene(log))
        scene = _merge_scene(rebuilt, state.scene)
        if RETRIEVAL_SCENES in abl:
            fixed = AssetLibrary.from_vocabulary(config.world_spec().class_vocabulary)
            scene = retrieve_scene(scene, fixed)
    writer.write(f"{d}/scene.json", scene.to_json())
    library = state.library

    # augment + supervise
    variants = stage("augment", lambda: augment_scene(scene, library, config.n_variants,
                                                      derive_seed(config.seed, "augment", i)))
    sims = [(scene_to_simworld(v, state.sensor, library), v) for v in variants]
    if STATIC_DATASET in abl and state.static_dataset is not None:
        dataset = state.static_dataset.copy()
    else:
        n_manip = config.n_manip if any(arm_world_from_scene(v, library).targets for v in variants) else 0
        fresh = stage("plan", lambda: build_dataset(sims, config.n_nav, n_manip,
                                                    derive_seed(config.seed, "dataset", i), i, library=library))
        dataset = state.dataset.copy()
        dataset.extend(fresh.episodes)
    static = state.static_dataset if state.static_dataset is not None else dataset.copy()
    writer.write(f"{d}/trajectories.jsonl", dataset.to_jsonl())
    writer.write(f"{d}/library.json", _json(library.to_dict()))

    # train
    tcfg = config.train_config(i)
    params, report = stage("train", lambda: train(dataset, state.params, tcfg, state.lexicon, real.sensor.max_range))
    params.nav_clip = dict(state.nav_clip)
    params.manip_clip = state.manip_clip
    writer.write(f"{d}/policy.json", _json(params.to_dict(state.lexicon)))
    writer.write(f"{d}/train_report.json", _json(report.to_dict()))

    # deploy in the real world
    limits = Limits(**config.limits)
    metrics, nav_rollouts, manip_rollouts = evaluate(
        real, params, state.tasks, limits, state.lexicon, scene_to_simworld(scene, state.sensor, library),
        arm_world_from_scene(scene, library), i, config.seed, config.eval_max_steps, config.manip_max_steps)

    # feedback
    rollouts = nav_rollouts + manip_rollouts
    writer.write(f"{d}/rollouts.jsonl", "".join(_json(r.to_dict()) + "\n" for r in rollouts))
    weights = FeedbackWeights(**config.weights)
    summary = {"iteration": i, "status": [r.status for r in rollouts]}
    f_mean = float("nan")
    nxt = IterationState(i + 1, state.start, state.tasks, state.lexicon, library, state.sensor, dataset, scene,
                         params, dict(state.nav_clip), state.manip_clip, static, False, list(state.history))
    if not sparse:
        bundle = gather_feedback(nav_rollouts, manip_rollouts, scene, library, weights, limits)
        res = stage("feedback", lambda: apply_feedback(scene, library, state.sensor, dataset, bundle,
                                                       state.nav_clip, state.manip_clip, i, state.lexicon,
                                                       derive_seed(config.seed, "feedback", i)))
        f_mean = float(np.mean([s for _, s, _ in bundle.task_feedback]))
        nxt.scene, nxt.library, nxt.sensor, nxt.dataset = res.scene, res.library, res.sensor, res.dataset
        nxt.nav_clip, nxt.manip_clip = res.nav_clip, res.manip_clip
        nxt.reexplore = bool(res.injected)
        summary.update(feedback_summary(bundle, weights))
        summary.update({
            "injected": [n.to_dict() for n in res.injected],
            "corrective_episodes": res.corrective,
            "corrective_skipped": res.skipped,
            "sensor": asdict(res.sensor),
            "action_clip": {"nav": res.nav_clip, "manip": res.manip_clip},
        })
    writer.write(f"{d}/feedback.json", _json(summary))
    row = {"iteration": i, **metrics.to_dict(), "f_score_mean": f_mean,
           "injected": summary.get("injected", []), "nodes": len(scene.nodes), "dataset": len(dataset),
           "train_checksum": report.checksum}
    writer.write(f"{d}/metrics.json", _json(row))
    nxt.history.append(row)
    writer.write("checkpoint.json", _json(nxt.to_dict()))
    return nxt


def _predicted_target(task: ManipTask, real_arm, sim_arm):
    """Point the reconstructed scene predicts for the task's target (same class, nearest)."""
    real_t = next((t for t in real_arm.targets if t.node_id == task.target_node), None)
    name = real_t.class_name if real_t is not None else None
    cands = [t for t in sim_arm.targets if t.class_name == name]
    if not cands:
        return None
    return min(cands, key=lambda t: math.dist(t.point, task.target)).point


@dataclass
class Report:
    history: list
    config: dict

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in self.history:
            w.writerow([row["iteration"]] + [_fmt(row[c]) for c in METRIC_COLUMNS[1:]])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"iterations: {len(self.history)}"]
        for row in self.history:
            lines.append(f"iter {row['iteration']}: SR={row['SR']:.3f} OS={row['OS']:.3f} SPL={row['SPL']:.3f} "
                         f"NE={row['NE']:.3f} manip_SR={row['manip_SR']:.3f} nodes={row['nodes']} "
                         f"dataset={row['dataset']} injected={len(row['injected'])}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"history": self.history, "config": self.config}


def _fmt(v) -> str:
    return "nan" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def run_lifecycle(config: LifecycleConfig, resume: bool = False) -> Report:
    writer = _Writer(config.out_dir)
    spec = config.world_spec()
    real = generate_world(spec)
    state = None
    if resume and config.out_dir and os.path.exists(os.path.join(config.out_dir, "checkpoint.json")):
        with open(os.path.join(config.out_dir, "checkpoint.json")) as f:
            state = IterationState.from_dict(json.load(f))
    writer.write("config.json", _json(config.to_dict() | {"out_dir": None}))
    writer.write("world.json", real.to_json())
    if state is None:
        state = initial_state(config, real)
        writer.write("eval_tasks.json", _json(state.tasks.to_dict()))
    while state.iteration < config.iterations:
        state = run_iteration(state, real, config, writer)
    report = Report(state.history, config.to_dict() | {"out_dir": None})
    writer.write("metrics.csv", report.metrics_csv())
    writer.write("report.json", _json(report.to_dict()))
    writer.write("summary.txt", report.summary())
    return report


def load_history(run_dir: str) -> list:
    rows = []
    for name in sorted(os.listdir(run_dir)):
        path = os.path.join(run_dir, name, "metrics.json")
        if name.startswith("iter_") and os.path.exists(path):
            with open(path) as f:
                rows.append(json.load(f))
    return rows
