"""Frontier exploration over a log-odds occupancy belief."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from . import _kernels
from .errors import DimensionMismatch, DomainError, StartInCollision
from .rng import stream
from .world import (DISPLACEMENT, N_HEADINGS, SCHEMA_VERSION, WALL_TOKEN, NavAction,
                    Pose, Scan, World, sense, step_robot)

L_FREE = -0.85
L_OCC = 0.85
L_CLAMP = 4.0
P_FREE = 0.35  # p below this is KNOWN-FREE
P_OCC = 0.65  # p above this is KNOWN-OCCUPIED
MIN_CLUSTER = 3
EIGHT = np.ones((3, 3), dtype=bool)


class SemanticHit(NamedTuple):
    point: tuple
    class_name: str
    step: int
    color: str | None = None
    cell: tuple = (-1, -1)


@dataclass(eq=False)
class BeliefGrid:
    log_odds: np.ndarray
    cell_size: float = 0.25
    max_range: float = 4.0
    semantic_hits: list = field(default_factory=list)

    @classmethod
    def empty(cls, shape: tuple, cell_size: float = 0.25, max_range: float = 4.0) -> BeliefGrid:
        return cls(np.zeros(shape, dtype=float), cell_size, max_range, [])

    @classmethod
    def for_world(cls, world: World) -> BeliefGrid:
        return cls.empty(world.shape, world.cell_size, world.sensor.max_range)

    @property
    def shape(self) -> tuple:
        return self.log_odds.shape

    def prob(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.log_odds))

    def known_free(self) -> np.ndarray:
        return self.prob() < P_FREE

    def known_occupied(self) -> np.ndarray:
        return self.prob() > P_OCC

    def unknown(self) -> np.ndarray:
        p = self.prob()
        return (p >= P_FREE) & (p <= P_OCC)

    def copy(self) -> BeliefGrid:
        return BeliefGrid(self.log_odds.copy(), self.cell_size, self.max_range, list(self.semantic_hits))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "shape": list(self.shape),
            "cell_size": self.cell_size,
            "max_range": self.max_range,
            "log_odds": [float(v) for v in self.log_odds.ravel()],
            "semantic_hits": [[list(h.point), h.class_name, h.step, h.color, list(h.cell)]
                              for h in self.semantic_hits],
        }

    @classmethod
    def from_dict(cls, d: dict) -> BeliefGrid:
        grid = np.asarray(d["log_odds"], dtype=float).reshape(d["shape"])
        hits = [SemanticHit(tuple(p), c, int(s), col, tuple(cell)) for p, c, s, col, cell in d["semantic_hits"]]
        return cls(grid, float(d["cell_size"]), float(d["max_range"]), hits)


def update_belief(belief: BeliefGrid, pose: Pose, scan: Scan) -> BeliefGrid:
    """Integrate one scan in place and return the same belief.

    Cells crossed before the hit get ``L_FREE``, the struck cell ``L_OCC``;
    rays with no return free every cell entered before ``max_range``.
    """
    n = len(scan.ranges)
    if len(scan.bearings) != n or len(scan.hit_class) != n:
        raise DimensionMismatch("scan fields have inconsistent lengths")
    h, w = belief.shape
    if not (0 <= pose.x < w * belief.cell_size and 0 <= pose.y < h * belief.cell_size):
        raise DimensionMismatch(f"pose {pose} outside the belief grid")
    ang = np.radians((pose.theta + np.asarray(scan.bearings, dtype=float)) % 360.0)  # same as the sensor
    ranges = np.asarray(scan.ranges, dtype=float)
    _kernels.update_log_odds(belief.log_odds, float(pose.x), float(pose.y), np.cos(ang), np.sin(ang), ranges,
                             belief.max_range, belief.cell_size, L_FREE, L_OCC, -L_CLAMP, L_CLAMP)
    colors = scan.hit_color if scan.hit_color else [None] * n
    cells = scan.hit_cells if scan.hit_cells is not None and len(scan.hit_cells) == n else None
    for i in np.flatnonzero(np.isfinite(ranges)):
        name = scan.hit_class[i]
        if name is None:
            continue
        r = ranges[i]
        point = (float(pose.x + r * math.cos(ang[i])), float(pose.y + r * math.sin(ang[i])))
        cell = (int(cells[i, 0]), int(cells[i, 1])) if cells is not None else (-1, -1)
        belief.semantic_hits.append(SemanticHit(point, name, int(scan.step), colors[i], cell))
    return belief


def cell_entropy(p):
    """Binary entropy in bits, with 0*log2(0) taken as 0. Accepts scalars or arrays."""
    arr = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise DomainError("probability must lie in [0, 1]")
    q = 1.0 - arr
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(arr > 0, -arr * np.log2(np.where(arr > 0, arr, 1.0)), 0.0)
        b = np.where(q > 0, -q * np.log2(np.where(q > 0, q, 1.0)), 0.0)
    out = a + b
    return float(out) if out.ndim == 0 else out


@dataclass
class FrontierCluster:
    cells: list  # (row, col), raster order
    centroid: tuple
    info_gain: float = 0.0
    path_cost: float = math.inf
    score: float = 0.0

    @property
    def key(self) -> tuple:
        return self.cells[0]


def frontier_mask(belief: BeliefGrid) -> np.ndarray:
    unknown = belief.unknown()
    near_unknown = ndimage.binary_dilation(unknown, structure=EIGHT)
    return belief.known_free() & near_unknown


def detect_frontiers(belief: BeliefGrid) -> list:
    mask = frontier_mask(belief)
    labels, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return []
    cs = belief.cell_size
    out = []
    rows, cols = np.nonzero(labels)  # raster order
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    bounds = np.searchsorted(lab[order], np.arange(1, n + 2))
    for k in range(n):
        idx = order[bounds[k]:bounds[k + 1]]
        if len(idx) < MIN_CLUSTER:
            continue
        r, c = rows[idx], cols[idx]
        cells = [(int(a), int(b)) for a, b in zip(r, c)]
        centroid = (float(np.mean((c + 0.5) * cs)), float(np.mean((r + 0.5) * cs)))
        out.append(FrontierCluster(cells, centroid))
    out.sort(key=lambda f: f.key)
    return out


def info_gain(belief: BeliefGrid, point: tuple, max_range: float | None = None) -> float:
    """Entropy of UNKNOWN cells visible from ``point``; only KNOWN-OCCUPIED cells block sight."""
    p = belief.prob()
    unknown = (p >= P_FREE) & (p <= P_OCC)
    ent = cell_entropy(p)
    total, _ = _kernels.visible_sum(ent, unknown, p > P_OCC, float(point[0]), float(point[1]),
                                    float(max_range if max_range is not None else belief.max_range),
                                    belief.cell_size)
    return float(total)


# --------------------------------------------------------------------------
# grid paths over known-free space
# --------------------------------------------------------------------------
_OFFSETS = ((0, 1, 1.0), (1, 0, 1.0), (0, -1, 1.0), (-1, 0, 1.0),
            (1, 1, math.sqrt(2)), (1, -1, math.sqrt(2)), (-1, 1, math.sqrt(2)), (-1, -1, math.sqrt(2)))


def traversable(belief: BeliefGrid) -> np.ndarray:
    """KNOWN-FREE cells with no KNOWN-OCCUPIED cell in their 3x3 neighbourhood."""
    occ = ndimage.binary_dilation(belief.known_occupied(), structure=EIGHT)
    return belief.known_free() & ~occ


def grid_distances(mask: np.ndarray, source: tuple, cell: float) -> tuple:
    """8-connected Dijkstra over ``mask`` (no corner cutting). Returns (dist, predecessors) per cell."""
    h, w = mask.shape
    mask = mask.copy()
    mask[source] = True
    idx = -np.ones((h, w), dtype=np.int64)
    nodes = np.flatnonzero(mask.ravel())
    idx.ravel()[nodes] = np.arange(len(nodes))
    src, dst, wt = [], [], []
    for dr, dc, length in _OFFSETS:
        a = mask[max(0, -dr):h - max(0, dr), max(0, -dc):w - max(0, dc)]
        b = mask[max(0, dr):h - max(0, -dr), max(0, dc):w - max(0, -dc)]
        ok = a & b
        if dr and dc:
            ok &= mask[max(0, -dr):h - max(0, dr), max(0, dc):w - max(0, -dc)]
            ok &= mask[max(0, dr):h - max(0, -dr), max(0, -dc):w - max(0, dc)]
        ia = idx[max(0, -dr):h - max(0, dr), max(0, -dc):w - max(0, dc)][ok]
        ib = idx[max(0, dr):h - max(0, -dr), max(0, dc):w - max(0, -dc)][ok]
        src.append(ia)
        dst.append(ib)
        wt.append(np.full(len(ia), length * cell))
    n = len(nodes)
    graph = csr_matrix((np.concatenate(wt), (np.concatenate(src), np.concatenate(dst))), shape=(n, n))
    d, pred = dijkstra(graph, indices=int(idx[source]), return_predecessors=True)
    dist = np.full((h, w), math.inf)
    dist.ravel()[nodes] = d
    pred_cells = -np.ones((h, w), dtype=np.int64)
    valid = pred >= 0
    pred_cells.ravel()[nodes[valid]] = nodes[pred[valid]]
    return dist, pred_cells


def extract_path(pred: np.ndarray, target: tuple) -> list:
    w = pred.shape[1]
    path = [target]
    k = pred[target]
    while k >= 0:
        path.append((int(k // w), int(k % w)))
        k = pred.ravel()[k]
    path.reverse()
    return path


def _cluster_target(cluster: FrontierCluster, dist: np.ndarray, cell: float) -> tuple:
    """Reachable cell in or beside the cluster closest to its centroid; (cell, extra metres)."""
    h, w = dist.shape
    best, best_key = None, None
    cx, cy = cluster.centroid
    for r, c in cluster.cells:
        for rr in range(max(0, r - 1), min(h, r + 2)):
            for cc in range(max(0, c - 1), min(w, c + 2)):
                if not math.isfinite(dist[rr, cc]):
                    continue
                off = math.hypot((cc + 0.5) * cell - cx, (rr + 0.5) * cell - cy)
                key = (off, dist[rr, cc], rr, cc)
                if best_key is None or key < best_key:
                    best, best_key = (rr, cc), key
    if best is None:
        return None, math.inf
    return best, best_key[0]


def score_frontier(belief: BeliefGrid, cluster: FrontierCluster, robot_pose: Pose, beta: float = 0.1,
                   dist: np.ndarray | None = None, semantic_bonus_per_class: float = 0.0) -> FrontierCluster:
    """Fill info gain, path cost and score = gain / (1 + beta * cost) on ``cluster``.

    ``dist`` is an optional precomputed distance field from the robot cell.
    """
    if not cluster.cells:
        raise DomainError("cluster must be nonempty")
    cs = belief.cell_size
    gain = info_gain(belief, cluster.centroid)
    if gain == 0.0:
        # a ring-shaped cluster can have its centroid out of range of every unknown cell;
        # its frontier cell nearest the centroid always borders unknown space
        cx, cy = cluster.centroid
        r, c = min(cluster.cells, key=lambda rc: ((rc[1] + 0.5) * cs - cx) ** 2 + ((rc[0] + 0.5) * cs - cy) ** 2)
        gain = info_gain(belief, ((c + 0.5) * cs, (r + 0.5) * cs))
    if semantic_bonus_per_class:
        near = {hit.class_name for hit in belief.semantic_hits
                if hit.class_name != WALL_TOKEN and math.dist(hit.point, cluster.centroid) <= belief.max_range}
        gain += semantic_bonus_per_class * len(near)
    if dist is None:
        source = (int(robot_pose.y // cs), int(robot_pose.x // cs))
        dist, _ = grid_distances(traversable(belief), source, cs)
    target, extra = _cluster_target(cluster, dist, cs)
    cost = math.inf if target is None else float(dist[target] + extra)
    cluster.info_gain = float(gain)
    cluster.path_cost = cost
    cluster.score = 0.0 if not math.isfinite(cost) else float(gain / (1.0 + beta * cost))
    return cluster


# --------------------------------------------------------------------------
# exploration loop
# --------------------------------------------------------------------------
@dataclass
class ExploreParams:
    coverage_target: float = 0.95
    beta: float = 0.1
    replan_every: int = 3
    lookahead: int = 2
    stuck_limit: int = 3
    semantic_bonus_per_class: float = 0.0
    seed: int = 0
    iteration: int | None = None


@dataclass
class ExplorationRecord:
    step: int
    pose: Pose
    action: NavAction | None  # action that produced this pose (None at step 0)
    scan: Scan

    def to_dict(self) -> dict:
        return {"step": self.step, "pose": self.pose.to_list(),
                "action": None if self.action is None else self.action.name, "scan": self.scan.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> ExplorationRecord:
        action = None if d["action"] is None else NavAction[d["action"]]
        return cls(int(d["step"]), Pose.from_list(d["pose"]), action, Scan.from_dict(d["scan"]))


@dataclass
class ExplorationLog:
    records: list
    belief: BeliefGrid
    coverage_fraction: float
    coverage_history: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)

    def belief_json(self) -> str:
        d = self.belief.to_dict()
        d["coverage_fraction"] = self.coverage_fraction
        return json.dumps(d, sort_keys=True)

    def save(self, log_path, belief_path):
        with open(log_path, "w") as f:
            f.write(self.to_jsonl())
        with open(belief_path, "w") as f:
            f.write(self.belief_json())

    @classmethod
    def load(cls, log_path, belief_path) -> ExplorationLog:
        with open(log_path) as f:
            records = [ExplorationRecord.from_dict(json.loads(line)) for line in f if line.strip()]
        with open(belief_path) as f:
            d = json.load(f)
        return cls(records, BeliefGrid.from_dict(d), float(d.get("coverage_fraction", 0.0)))


def reachable_free(world: World, start: Pose, iteration: int | None = None) -> np.ndarray:
    """Ground-truth FREE, object-free cells 4-connected to the start cell."""
    free = world.label_grid(iteration) < 0
    labels, _ = ndimage.label(free)
    start_label = labels[world.cell_of(start.x, start.y)]
    return labels == start_label if start_label > 0 else np.zeros_like(free)


def coverage(belief: BeliefGrid, region: np.ndarray) -> float:
    total = int(region.sum())
    if total == 0:
        return 1.0
    return float((~belief.unknown() & region).sum()) / total


def _heading_dirs() -> np.ndarray:
    d = DISPLACEMENT[:, 0, :].astype(float)
    return np.degrees(np.arctan2(d[:, 1], d[:, 0]))


_HEADING_DIR = _heading_dirs()


def _wrap_deg(a: float) -> float:
    return (a + 180.0) % 360.0 - 180.0


def steer(pose: Pose, waypoint: tuple) -> NavAction:
    """Primitive that moves toward ``waypoint`` given the lattice motion directions."""
    bearing = math.degrees(math.atan2(waypoint[1] - pose.y, waypoint[0] - pose.x))
    errs = np.abs([_wrap_deg(bearing - a) for a in _HEADING_DIR])
    best = int(np.argmin(errs))
    diff = (best - pose.heading_index) % N_HEADINGS
    if diff == 0:
        return NavAction.FWD_25
    if diff > N_HEADINGS // 2:
        return NavAction.RIGHT_30 if N_HEADINGS - diff >= 2 else NavAction.RIGHT_15
    return NavAction.LEFT_30 if diff >= 2 else NavAction.LEFT_15


def explore(world: World, start: Pose, budget_steps: int, params: ExploreParams | None = None) -> ExplorationLog:
    params = params or ExploreParams()
    it = world._iter(params.iteration)
    if not world.in_bounds(start.x, start.y) or world.robot_collides(start.x, start.y, it):
        raise StartInCollision(f"start pose {start} is in collision")
    if budget_steps < 0:
        raise DomainError("budget_steps must be >= 0")
    rng = stream(params.seed, "explore", "sense")
    cs = world.cell_size
    region = reachable_free(world, start, it)
    belief = BeliefGrid.for_world(world)
    pose = start
    scan = sense(world, pose, it, rng, step=0)
    update_belief(belief, pose, scan)
    records = [ExplorationRecord(0, pose, None, scan)]
    cov = coverage(belief, region)
    history = [cov]
    blacklist: set = set()
    path: list = []
    target_cells: list = []
    since_plan = 0
    collisions = 0
    target_steps = 0
    near_only = False
    stall_limit = 4 * (belief.shape[0] + belief.shape[1])
    step = 0
    while step < budget_steps and cov < params.coverage_target:
        if not path or since_plan >= params.replan_every:
            plan = _plan(belief, pose, params, blacklist)
            if plan is None:
                break
            cells, path = plan
            if cells[0] != (target_cells[0] if target_cells else None):
                collisions, target_steps = 0, 0
            target_cells = cells
            since_plan = 0
        here = (int(pose.y // cs), int(pose.x // cs))
        if here in path:
            path = path[path.index(here) + 1:]
            if not path:
                continue
        wp = path[0] if near_only else path[min(params.lookahead, len(path)) - 1]
        action = steer(pose, ((wp[1] + 0.5) * cs, (wp[0] + 0.5) * cs))
        pose, collided = step_robot(world, pose, action, it)
        step += 1
        since_plan += 1
        target_steps += 1
        near_only = collided
        if collided:
            collisions += 1
        scan = sense(world, pose, it, rng, step=step)
        update_belief(belief, pose, scan)
        records.append(ExplorationRecord(step, pose, action, scan))
        cov = coverage(belief, region)
        history.append(cov)
        if collisions >= params.stuck_limit or target_steps > stall_limit:
            blacklist.update(target_cells)
            path, target_cells, collisions, target_steps = [], [], 0, 0
    return ExplorationLog(records, belief, cov, history)


def _plan(belief: BeliefGrid, pose: Pose, params: ExploreParams, blacklist: set):
    """Best-scoring frontier not blacklisted; returns (cluster cells, cell path) or None."""
    cs = belief.cell_size
    source = (int(pose.y // cs), int(pose.x // cs))
    dist, pred = grid_distances(traversable(belief), source, cs)
    scored = []
    for cl in detect_frontiers(belief):
        if any(c in blacklist for c in cl.cells):
            continue
        score_frontier(belief, cl, pose, params.beta, dist, params.semantic_bonus_per_class)
        if cl.score > 0:
            scored.append(cl)
    # stable sort keeps the deterministic cluster order on equal scores
    scored.sort(key=lambda f: -f.score)
    for best in scored:
        target, _ = _cluster_target(best, dist, cs)
        if target == source:
            # a full sweep from here did not resolve it; sensing cannot help further
            blacklist.update(best.cells)
            continue
        return best.cells, extract_path(pred, target)[1:]
    return None
