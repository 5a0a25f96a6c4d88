"""Ground-truth 2D world: generation, semantic range sensing, robot and arm stepping.

The world is a cell grid (FREE / WALL) plus semantic objects. Objects block
sensing and motion through the cells their footprint covers (cells whose
centre lies inside the footprint disc), so the same geometry is seen by the
range sensor, the robot collision checker and the occupancy map.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum, IntEnum

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import DomainError, PlacementFailure, PoseInCollision, UnknownObjectId
from .rng import stream

SCHEMA_VERSION = 1
WALL_TOKEN = "WALL"
NO_HIT = math.inf

ROBOT_RADIUS = 0.2
MOTION_RESOLUTION = 0.05  # metres between collision samples
ARM_RESOLUTION = 0.05  # radians between collision samples
LATTICE_QUANTUM = 0.125
N_HEADINGS = 24
HEADING_STEP = 15
JOINT_LIMIT = math.radians(175.0)
DEFAULT_LINKS = (0.3, 0.25, 0.2)
INACTIVE = 1 << 30


class CellState(IntEnum):
    FREE = 0
    WALL = 1


class NavAction(IntEnum):
    """The 7 navigation primitives; values are the policy's class indices."""

    STOP = 0
    FWD_25 = 1
    FWD_50 = 2
    LEFT_15 = 3
    RIGHT_15 = 4
    LEFT_30 = 5
    RIGHT_30 = 6


# (translation m, rotation deg); LEFT is counter-clockwise
PRIMITIVES = {
    NavAction.STOP: (0.0, 0),
    NavAction.FWD_25: (0.25, 0),
    NavAction.FWD_50: (0.50, 0),
    NavAction.LEFT_15: (0.0, 15),
    NavAction.RIGHT_15: (0.0, -15),
    NavAction.LEFT_30: (0.0, 30),
    NavAction.RIGHT_30: (0.0, -30),
}


def _displacement_table() -> np.ndarray:
    """Forward displacement per heading, rounded onto the 0.125 m motion lattice."""
    table = np.zeros((N_HEADINGS, 2, 2), dtype=np.int64)
    for h in range(N_HEADINGS):
        a = math.radians(h * HEADING_STEP)
        for j, dist in enumerate((0.25, 0.50)):
            table[h, j, 0] = math.floor(dist * math.cos(a) / LATTICE_QUANTUM + 0.5)
            table[h, j, 1] = math.floor(dist * math.sin(a) / LATTICE_QUANTUM + 0.5)
    return table


DISPLACEMENT = _displacement_table()


class EventKind(str, Enum):
    OBJECT_APPEAR = "OBJECT_APPEAR"
    OBJECT_MOVE = "OBJECT_MOVE"
    SENSOR_DEGRADE = "SENSOR_DEGRADE"


@dataclass(frozen=True)
class SensorSpec:
    n_rays: int = 72
    max_range: float = 4.0
    dropout_rate: float = 0.0
    range_noise_sigma: float = 0.0

    def __post_init__(self):
        if self.n_rays < 8:
            raise DomainError("n_rays must be >= 8")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise DomainError("dropout_rate must lie in [0, 1]")
        if self.range_noise_sigma < 0:
            raise DomainError("range_noise_sigma must be >= 0")


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: int = 0  # degrees, multiple of 15 in [0, 360)

    def __post_init__(self):
        if int(self.theta) != self.theta or int(self.theta) % HEADING_STEP:
            raise DomainError(f"heading {self.theta} is not a multiple of {HEADING_STEP} degrees")
        object.__setattr__(self, "theta", int(self.theta) % 360)

    @property
    def heading_index(self) -> int:
        return self.theta // HEADING_STEP

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def to_list(self) -> list:
        return [self.x, self.y, self.theta]

    @classmethod
    def from_list(cls, v) -> Pose:
        return cls(float(v[0]), float(v[1]), int(v[2]))


@dataclass
class SemObject:
    id: int
    class_name: str
    color: str
    center: tuple
    footprint_radius: float
    mass: float
    active_from_iteration: int = 0

    def __post_init__(self):
        self.center = (float(self.center[0]), float(self.center[1]))
        if self.footprint_radius <= 0:
            raise DomainError("footprint_radius must be > 0")
        if self.mass < 0:
            raise DomainError("mass must be >= 0")


@dataclass(frozen=True)
class DynamicsEvent:
    iteration: int
    kind: EventKind
    object_id: int | None = None
    center: tuple | None = None
    dropout_rate: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        if self.iteration < 1:
            raise DomainError("dynamics events start at iteration 1")

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "kind": self.kind.value,
            "object_id": self.object_id,
            "center": list(self.center) if self.center is not None else None,
            "dropout_rate": self.dropout_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DynamicsEvent:
        c = d.get("center")
        return cls(int(d["iteration"]), EventKind(d["kind"]), d.get("object_id"),
                   tuple(c) if c is not None else None, d.get("dropout_rate"))


# (class_name, color, mass_kg, footprint_radius_m). Radius 0.15 rasterises to a
# single cell and 0.36 to a 3x3 block.
DEFAULT_VOCABULARY = (
    ("chair", "red", 5.0, 0.36),
    ("table", "brown", 12.0, 0.36),
    ("sofa", "blue", 20.0, 0.36),
    ("cabinet", "white", 15.0, 0.36),
    ("cup", "red", 0.2, 0.15),
    ("bottle", "green", 0.4, 0.15),
    ("box", "yellow", 0.8, 0.15),
    ("book", "blue", 0.3, 0.15),
)


@dataclass
class WorldSpec:
    width_cells: int
    height_cells: int
    cell_size: float = 0.25
    n_rooms: int = 1
    object_count: int = 0
    class_vocabulary: tuple = DEFAULT_VOCABULARY
    dynamics: list = field(default_factory=list)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    seed: int = 0

    def __post_init__(self):
        self.class_vocabulary = tuple(tuple(v) for v in self.class_vocabulary)
        self.dynamics = [e if isinstance(e, DynamicsEvent) else DynamicsEvent.from_dict(e) for e in self.dynamics]
        if isinstance(self.sensor, dict):
            self.sensor = SensorSpec(**self.sensor)
        self.validate()

    def validate(self):
        if self.width_cells < 8 or self.height_cells < 8:
            raise DomainError("world must be at least 8x8 cells")
        if self.cell_size <= 0:
            raise DomainError("cell_size must be > 0")
        if self.sensor.max_range <= self.cell_size:
            raise DomainError("sensor max_range must exceed cell_size")
        if self.object_count > 0 and not self.class_vocabulary:
            raise DomainError("objects need a class vocabulary")
        for ev in self.dynamics:
            if ev.object_id is not None and not 0 <= ev.object_id < self.object_count:
                raise UnknownObjectId(f"dynamics event references object {ev.object_id}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_vocabulary"] = [list(v) for v in self.class_vocabulary]
        d["dynamics"] = [e.to_dict() for e in self.dynamics]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> WorldSpec:
        d = dict(d)
        if "sensor" in d:
            d["sensor"] = SensorSpec(**d["sensor"])
        if "class_vocabulary" in d:
            d["class_vocabulary"] = tuple(tuple(v) for v in d["class_vocabulary"])
        return cls(**d)


@dataclass
class Scan:
    """One sweep. ``ranges`` holds ``inf`` for NO_HIT; bearings are relative to heading."""

    bearings: np.ndarray
    ranges: np.ndarray
    hit_class: list
    hit_color: list
    hit_cells: np.ndarray  # (n, 2) row/col of the struck cell, -1 when no hit
    step: int = 0

    @property
    def n_rays(self) -> int:
        return len(self.ranges)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "bearings": [float(b) for b in self.bearings],
            "ranges": [None if not math.isfinite(r) else float(r) for r in self.ranges],
            "hit_class": list(self.hit_class),
            "hit_color": list(self.hit_color),
            "hit_cells": self.hit_cells.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scan:
        return cls(
            np.asarray(d["bearings"], dtype=float),
            np.array([NO_HIT if r is None else r for r in d["ranges"]], dtype=float),
            list(d["hit_class"]),
            list(d["hit_color"]),
            np.asarray(d["hit_cells"], dtype=np.int64).reshape(-1, 2),
            int(d.get("step", 0)),
        )


@dataclass(eq=False)
class World:
    grid: np.ndarray  # uint8 [row, col], CellState values
    objects: list
    sensor: SensorSpec
    dynamics: list = field(default_factory=list)
    cell_size: float = 0.25
    iteration: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def shape(self) -> tuple:
        return self.grid.shape

    @property
    def width_m(self) -> float:
        return self.grid.shape[1] * self.cell_size

    @property
    def height_m(self) -> float:
        return self.grid.shape[0] * self.cell_size

    def _iter(self, iteration):
        return self.iteration if iteration is None else iteration

    def active_objects(self, iteration: int | None = None) -> list:
        it = self._iter(iteration)
        return [o for o in self.objects if o.active_from_iteration <= it]

    def label_grid(self, iteration: int | None = None) -> np.ndarray:
        """-1 free, 0 wall, k+1 for ``objects[k]`` (active only)."""
        it = self._iter(iteration)
        key = ("labels", it)
        if key not in self._cache:
            labels = np.where(self.grid == CellState.WALL, 0, -1).astype(np.int64)
            for k, obj in enumerate(self.objects):
                if obj.active_from_iteration > it:
                    continue
                rows, cols = object_cells(obj.center, obj.footprint_radius, self.cell_size, self.grid.shape)
                free = labels[rows, cols] == -1
                labels[rows[free], cols[free]] = k + 1
            self._cache[key] = labels
        return self._cache[key]

    def blocked(self, iteration: int | None = None) -> np.ndarray:
        return self.label_grid(iteration) >= 0

    def clearance(self, iteration: int | None = None, radius: float = ROBOT_RADIUS) -> np.ndarray:
        """Cells in which any robot position is collision-free."""
        it = self._iter(iteration)
        key = ("clear", it, radius)
        if key not in self._cache:
            reach = int(math.ceil(radius / self.cell_size))
            blocked = np.pad(self.blocked(it), reach, constant_values=True)
            size = 2 * reach + 1
            self._cache[key] = ~ndimage.maximum_filter(blocked, size=size, mode="constant", cval=True)[
                reach:-reach, reach:-reach]
        return self._cache[key]

    def robot_free_cells(self, iteration: int | None = None) -> np.ndarray:
        """Cells whose centre is a collision-free robot position."""
        return self.clearance(iteration)

    def cell_of(self, x: float, y: float) -> tuple:
        return int(math.floor(y / self.cell_size)), int(math.floor(x / self.cell_size))

    def cell_center(self, row: int, col: int) -> tuple:
        return ((col + 0.5) * self.cell_size, (row + 0.5) * self.cell_size)

    def in_bounds(self, x: float, y: float) -> bool:
        return 0 <= x < self.width_m and 0 <= y < self.height_m

    def robot_collides(self, x: float, y: float, iteration: int | None = None) -> bool:
        it = self._iter(iteration)
        return bool(_kernels.point_collides(self.blocked(it), self.clearance(it), float(x), float(y),
                                            ROBOT_RADIUS, self.cell_size))

    def copy(self) -> World:
        return World(self.grid.copy(), [copy.copy(o) for o in self.objects], self.sensor,
                     list(self.dynamics), self.cell_size, self.iteration)

    # serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "cell_size": self.cell_size,
            "height_cells": int(self.grid.shape[0]),
            "width_cells": int(self.grid.shape[1]),
            "grid_rle": rle_encode(self.grid),
            "objects": [asdict(o) | {"center": list(o.center)} for o in self.objects],
            "sensor": asdict(self.sensor),
            "dynamics": [e.to_dict() for e in self.dynamics],
            "iteration": self.iteration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> World:
        grid = rle_decode(d["grid_rle"], (d["height_cells"], d["width_cells"]))
        objects = [SemObject(**o) for o in d["objects"]]
        return cls(grid, objects, SensorSpec(**d["sensor"]),
                   [DynamicsEvent.from_dict(e) for e in d["dynamics"]], float(d["cell_size"]),
                   int(d.get("iteration", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> World:
        return cls.from_dict(json.loads(text))


def rle_encode(grid: np.ndarray) -> list:
    flat = np.asarray(grid).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [flat.size])))
    return [[int(flat[s]), int(n)] for s, n in zip(starts, lengths)]


def rle_decode(runs: list, shape: tuple) -> np.ndarray:
    flat = np.concatenate([np.full(n, v, dtype=np.uint8) for v, n in runs]) if runs else np.zeros(0, np.uint8)
    return flat.reshape(shape)


def object_cells(center, radius: float, cell: float, shape: tuple) -> tuple:
    """Rows/cols of cells whose centre lies within ``radius`` of ``center``."""
    cx, cy = center
    reach = int(math.ceil(radius / cell)) + 1
    c0, r0 = int(math.floor(cx / cell)), int(math.floor(cy / cell))
    rows, cols = np.mgrid[r0 - reach:r0 + reach + 1, c0 - reach:c0 + reach + 1]
    d2 = ((cols + 0.5) * cell - cx) ** 2 + ((rows + 0.5) * cell - cy) ** 2
    inside = (d2 <= radius * radius) & (rows >= 0) & (rows < shape[0]) & (cols >= 0) & (cols < shape[1])
    if not inside.any() and 0 <= r0 < shape[0] and 0 <= c0 < shape[1]:
        return np.array([r0]), np.array([c0])
    return rows[inside], cols[inside]


def disc_overlaps_cells(center, radius: float, mask: np.ndarray, cell: float) -> bool:
    """True if the disc intersects (positive area) any True cell of ``mask``."""
    cx, cy = center
    reach = int(math.ceil(radius / cell)) + 1
    c0, r0 = int(math.floor(cx / cell)), int(math.floor(cy / cell))
    for r in range(r0 - reach, r0 + reach + 1):
        for c in range(c0 - reach, c0 + reach + 1):
            outside = not (0 <= r < mask.shape[0] and 0 <= c < mask.shape[1])
            if not outside and not mask[r, c]:
                continue
            qx = min(max(cx, c * cell), (c + 1) * cell)
            qy = min(max(cy, r * cell), (r + 1) * cell)
            if (cx - qx) ** 2 + (cy - qy) ** 2 < radius * radius:
                return True
    return False


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------
MIN_ROOM = 5
DOOR_WIDTH = 3


def _split_rooms(rng, grid: np.ndarray, n_rooms: int) -> np.ndarray:
    """Binary space partition with one 3-cell door per dividing wall.

    Returns a boolean keep-out mask around doors. Stops early when no room
    can be split further.
    """
    h, w = grid.shape
    keepout = np.zeros_like(grid, dtype=bool)
    rooms = [(1, 1, h - 2, w - 2)]  # inclusive interior (r0, c0, r1, c1)
    while len(rooms) < n_rooms:
        rooms.sort(key=lambda r: (-(r[2] - r[0] + 1) * (r[3] - r[1] + 1), r))
        for i, (r0, c0, r1, c1) in enumerate(rooms):
            rh, rw = r1 - r0 + 1, c1 - c0 + 1
            vertical = rw >= rh  # wall is a column
            span = rw if vertical else rh
            if span < 2 * MIN_ROOM + 1:
                continue
            along = rh if vertical else rw
            if along < DOOR_WIDTH:
                continue
            for _ in range(20):
                p = int(rng.integers(MIN_ROOM, span - MIN_ROOM))  # offset of the wall line
                line = (slice(r0 - 1, r1 + 2), c0 + p) if vertical else (r0 + p, slice(c0 - 1, c1 + 2))
                if not keepout[line].any():
                    break
            else:
                continue
            lo = 1 if along >= DOOR_WIDTH + 2 else 0
            d = int(rng.integers(lo, along - DOOR_WIDTH - lo + 1))
            if vertical:
                col = c0 + p
                grid[r0:r1 + 1, col] = CellState.WALL
                grid[r0 + d:r0 + d + DOOR_WIDTH, col] = CellState.FREE
                keepout[r0 + d:r0 + d + DOOR_WIDTH, max(col - 2, 0):col + 3] = True
                new = [(r0, c0, r1, col - 1), (r0, col + 1, r1, c1)]
            else:
                row = r0 + p
                grid[row, c0:c1 + 1] = CellState.WALL
                grid[row, c0 + d:c0 + d + DOOR_WIDTH] = CellState.FREE
                keepout[max(row - 2, 0):row + 3, c0 + d:c0 + d + DOOR_WIDTH] = True
                new = [(r0, c0, row - 1, c1), (row + 1, c0, r1, c1)]
            rooms[i:i + 1] = new
            break
        else:
            break
    return keepout


def _robot_free_connected(grid: np.ndarray, obj_mask: np.ndarray, cell: float) -> bool:
    blocked = (grid == CellState.WALL) | obj_mask
    reach = int(math.ceil(ROBOT_RADIUS / cell))
    padded = np.pad(blocked, reach, constant_values=True)
    clear = ~ndimage.maximum_filter(padded, size=2 * reach + 1, mode="constant", cval=True)[
        reach:-reach, reach:-reach]
    _, n = ndimage.label(clear)
    return n == 1


def generate_world(spec: WorldSpec) -> World:
    spec.validate()
    rng = stream(spec.seed, "world")
    h, w = spec.height_cells, spec.width_cells
    cell = spec.cell_size
    grid = np.zeros((h, w), dtype=np.uint8)
    grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = CellState.WALL
    keepout = _split_rooms(rng, grid, max(1, spec.n_rooms))

    appear = {ev.object_id: ev.iteration for ev in spec.dynamics
              if ev.kind == EventKind.OBJECT_APPEAR and ev.object_id is not None}
    vocab = spec.class_vocabulary
    order = rng.permutation(len(vocab)) if vocab else []
    walls = grid == CellState.WALL
    near_wall = ndimage.binary_dilation(walls, structure=np.ones((3, 3), bool))
    obj_mask = np.zeros((h, w), dtype=bool)
    obj_halo = np.zeros((h, w), dtype=bool)
    objects: list[SemObject] = []
    for k in range(spec.object_count):
        name, color, mass, radius = vocab[int(order[k % len(vocab)])]
        for _ in range(1000):
            row = int(rng.integers(1, h - 1))
            col = int(rng.integers(1, w - 1))
            center = ((col + 0.5) * cell, (row + 0.5) * cell)
            rows, cols = object_cells(center, radius, cell, (h, w))
            if near_wall[rows, cols].any() or keepout[rows, cols].any() or obj_halo[rows, cols].any():
                continue
            if disc_overlaps_cells(center, radius, walls, cell):
                continue
            if any(o.class_name == name and math.dist(o.center, center) < 2.0 for o in objects):
                continue
            trial = obj_mask.copy()
            trial[rows, cols] = True
            if not _robot_free_connected(grid, trial, cell):
                continue
            break
        else:
            raise PlacementFailure(f"could not place object {k} ({name}) in 1000 attempts")
        obj_mask = trial
        halo = np.zeros((h, w), dtype=bool)
        halo[rows, cols] = True
        obj_halo |= ndimage.binary_dilation(halo, structure=np.ones((3, 3), bool))
        objects.append(SemObject(k, name, color, center, float(radius), float(mass), appear.get(k, 0)))
    return World(grid, objects, spec.sensor, list(spec.dynamics), cell, 0)


# --------------------------------------------------------------------------
# sensing
# --------------------------------------------------------------------------
_DIR_CACHE: dict = {}


def ray_directions(theta: int, n_rays: int) -> tuple:
    """Relative bearings (deg) and absolute unit direction components."""
    key = (int(theta) % 360, n_rays)
    if key not in _DIR_CACHE:
        bearings = np.arange(n_rays) * (360.0 / n_rays)
        absolute = np.radians((theta + bearings) % 360.0)
        _DIR_CACHE[key] = (bearings, np.cos(absolute), np.sin(absolute))
    return _DIR_CACHE[key]


def cast_scan(world: World, x: float, y: float, theta: int, iteration: int | None = None,
              sensor: SensorSpec | None = None, rng: np.random.Generator | None = None, step: int = 0) -> Scan:
    """Ray cast without the free-pose precondition (used for predicted scans)."""
    sensor = sensor or world.sensor
    labels = world.label_grid(iteration)
    bearings, dx, dy = ray_directions(theta, sensor.n_rays)
    ranges, lab, rows, cols = _kernels.cast_rays(labels, float(x), float(y), dx, dy, sensor.max_range,
                                                 world.cell_size)
    ranges = ranges.copy()
    if rng is not None and sensor.dropout_rate > 0:
        drop = rng.random(len(ranges)) < sensor.dropout_rate
        ranges[drop] = NO_HIT
        lab = np.where(drop, -1, lab)
        rows = np.where(drop, -1, rows)
        cols = np.where(drop, -1, cols)
    if rng is not None and sensor.range_noise_sigma > 0:
        hit = np.isfinite(ranges)
        noise = rng.normal(0.0, sensor.range_noise_sigma, len(ranges))
        ranges[hit] = np.clip(ranges[hit] + noise[hit], 0.0, sensor.max_range)
    names, colors = [], []
    for v in lab:
        if v < 0:
            names.append(None)
            colors.append(None)
        elif v == 0:
            names.append(WALL_TOKEN)
            colors.append(None)
        else:
            o = world.objects[v - 1]
            names.append(o.class_name)
            colors.append(o.color)
    return Scan(bearings.copy(), ranges, names, colors, np.stack([rows, cols], axis=1).astype(np.int64), step)


def sense(world: World, pose: Pose, iteration: int | None = None, rng: np.random.Generator | None = None,
          step: int = 0) -> Scan:
    if not world.in_bounds(pose.x, pose.y):
        raise PoseInCollision(f"pose {pose} outside the grid")
    row, col = world.cell_of(pose.x, pose.y)
    if world.label_grid(iteration)[row, col] >= 0:
        raise PoseInCollision(f"pose {pose} lies on an occupied cell")
    return cast_scan(world, pose.x, pose.y, pose.theta, iteration, None, rng, step)


# --------------------------------------------------------------------------
# robot stepping
# --------------------------------------------------------------------------
def step_robot(world: World, pose: Pose, action: NavAction, iteration: int | None = None) -> tuple:
    action = NavAction(action)
    if action == NavAction.STOP:
        return pose, False
    trans, rot = PRIMITIVES[action]
    if rot:
        return Pose(pose.x, pose.y, (pose.theta + rot) % 360), False
    j = 0 if action == NavAction.FWD_25 else 1
    dx = float(DISPLACEMENT[pose.heading_index, j, 0]) * LATTICE_QUANTUM
    dy = float(DISPLACEMENT[pose.heading_index, j, 1]) * LATTICE_QUANTUM
    it = world._iter(iteration)
    ok = _kernels.segment_free(world.blocked(it), world.clearance(it), float(pose.x), float(pose.y), dx, dy,
                               ROBOT_RADIUS, world.cell_size, MOTION_RESOLUTION)
    if not ok:
        return pose, True
    return Pose(pose.x + dx, pose.y + dy, pose.theta), False


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------
def apply_dynamics(world: World, iteration: int) -> World:
    if iteration < 0:
        raise DomainError("iteration must be >= 0")
    out = world.copy()
    by_id = {o.id: o for o in out.objects}
    sensor = out.sensor
    for ev in world.dynamics:
        if ev.iteration > iteration:
            continue
        if ev.kind in (EventKind.OBJECT_APPEAR, EventKind.OBJECT_MOVE):
            if ev.object_id not in by_id:
                raise UnknownObjectId(f"dynamics event references unknown object {ev.object_id}")
            obj = by_id[ev.object_id]
            if ev.kind == EventKind.OBJECT_APPEAR:
                obj.active_from_iteration = min(obj.active_from_iteration, ev.iteration)
            else:
                obj.center = (float(ev.center[0]), float(ev.center[1]))
        elif ev.kind == EventKind.SENSOR_DEGRADE:
            sensor = SensorSpec(sensor.n_rays, sensor.max_range, float(ev.dropout_rate), sensor.range_noise_sigma)
    out.sensor = sensor
    out.iteration = iteration
    return out


# --------------------------------------------------------------------------
# planar arm
# --------------------------------------------------------------------------
@dataclass
class ArmTarget:
    point: tuple
    class_name: str
    color: str
    mass: float
    node_id: int | None = None


@dataclass
class ArmWorld:
    link_lengths: tuple = DEFAULT_LINKS
    joint_limit: float = JOINT_LIMIT
    obstacles: list = field(default_factory=list)  # (cx, cy, r)
    targets: list = field(default_factory=list)

    def __post_init__(self):
        self.link_lengths = tuple(float(l) for l in self.link_lengths)
        self.obstacles = [tuple(float(v) for v in o) for o in self.obstacles]
        if any(l <= 0 for l in self.link_lengths):
            raise DomainError("link lengths must be positive")
        if any(o[2] <= 0 for o in self.obstacles):
            raise DomainError("obstacle radii must be positive")

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    def to_dict(self) -> dict:
        return {
            "link_lengths": list(self.link_lengths),
            "joint_limit": self.joint_limit,
            "obstacles": [list(o) for o in self.obstacles],
            "targets": [asdict(t) | {"point": list(t.point)} for t in self.targets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArmWorld:
        targets = [ArmTarget(tuple(t["point"]), t["class_name"], t["color"], t["mass"], t.get("node_id"))
                   for t in d.get("targets", [])]
        return cls(tuple(d["link_lengths"]), d["joint_limit"], [tuple(o) for o in d["obstacles"]], targets)


def forward_kinematics(config, link_lengths=DEFAULT_LINKS) -> tuple:
    """Joint positions (base first) and the end-effector point of a planar chain."""
    q = np.asarray(config, dtype=float)
    lengths = np.asarray(link_lengths, dtype=float)
    if np.any(lengths <= 0):
        raise DomainError("link lengths must be positive")
    angles = np.cumsum(q)
    steps = np.stack([lengths * np.cos(angles), lengths * np.sin(angles)], axis=1)
    joints = np.vstack([np.zeros(2), np.cumsum(steps, axis=0)])
    return joints, joints[-1].copy()


def _obstacle_array(arm: ArmWorld) -> np.ndarray:
    return np.asarray(arm.obstacles, dtype=float).reshape(-1, 3)


def arm_config_collides(arm: ArmWorld, config) -> bool:
    """Segment-disc test of every link against every obstacle."""
    if not arm.obstacles:
        return False
    return bool(_kernels.arm_collides(np.asarray(config, dtype=float), np.asarray(arm.link_lengths, dtype=float),
                                      _obstacle_array(arm)))


def arm_motion_free(arm: ArmWorld, q0, q1, resolution: float = ARM_RESOLUTION) -> bool:
    if not arm.obstacles:
        return True
    return bool(_kernels.arm_motion_free(np.asarray(q0, dtype=float), np.asarray(q1, dtype=float),
                                         np.asarray(arm.link_lengths, dtype=float), _obstacle_array(arm),
                                         float(resolution)))


def step_arm(arm: ArmWorld, config, delta) -> tuple:
    q = np.asarray(config, dtype=float)
    d = np.asarray(delta, dtype=float)
    if not np.all(np.isfinite(d)):
        raise DomainError("joint deltas must be finite")
    target = np.clip(q + d, -arm.joint_limit, arm.joint_limit)
    if np.array_equal(target, q):
        return q.copy(), False
    if not arm_motion_free(arm, q, target):
        return q.copy(), True
    return target, False
