"""Scene graphs: reconstruction from exploration logs, relations, augmentation, sim instantiation."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import EmptyLog, InvalidScene
from .rng import stream
from .world import (DEFAULT_VOCABULARY, SCHEMA_VERSION, WALL_TOKEN, CellState, SemObject, SensorSpec, World,
                    object_cells, rle_decode, rle_encode)

CLUSTER_RADIUS = 0.4
MIN_HITS = 5
BBOX_PAD = 0.05
SURFACE_MAX_HALF = 0.25  # nodes no wider than this are treated as surface items
ADJACENT_GAP = 0.1
NEAR_GAP = 1.0
ON_TOP_OVERLAP = 0.5
DEFAULT_MASS = 0.3

FLOOR, SURFACE = "FLOOR", "SURFACE"
EXPLORED, INJECTED, AUGMENTED = "EXPLORED", "INJECTED_FROM_FEEDBACK", "AUGMENTED"
NEAR, ADJACENT, ON_TOP_OF = "NEAR", "ADJACENT", "ON_TOP_OF"


@dataclass
class AssetNode:
    id: int
    class_name: str
    color: str | None
    bbox: tuple  # (cx, cy, half_w, half_h)
    support_height: str = FLOOR
    provenance: str = EXPLORED
    mass: float | None = None

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)

    @property
    def center(self) -> tuple:
        return self.bbox[0], self.bbox[1]

    @property
    def radius(self) -> float:
        return max(self.bbox[2], self.bbox[3])

    def bounds(self) -> tuple:
        cx, cy, hw, hh = self.bbox
        return cx - hw, cy - hh, cx + hw, cy + hh

    def to_dict(self) -> dict:
        return asdict(self) | {"bbox": list(self.bbox)}

    @classmethod
    def from_dict(cls, d: dict) -> AssetNode:
        return cls(**d)


@dataclass(frozen=True)
class RelationEdge:
    src: int
    dst: int
    relation: str
    distance: float


@dataclass(frozen=True)
class AssetPrototype:
    class_name: str
    color: str | None
    half_w: float
    half_h: float
    mass: float
    provenance: str = "VOCABULARY"


@dataclass
class AssetLibrary:
    prototypes: list = field(default_factory=list)

    @classmethod
    def from_vocabulary(cls, vocabulary=DEFAULT_VOCABULARY) -> AssetLibrary:
        return cls([AssetPrototype(n, c, float(r), float(r), float(m)) for n, c, m, r in vocabulary])

    def __len__(self) -> int:
        return len(self.prototypes)

    def add(self, proto: AssetPrototype) -> bool:
        """Append unless an identical prototype exists; never removes."""
        if proto in self.prototypes:
            return False
        self.prototypes.append(proto)
        return True

    def by_class(self, class_name: str) -> list:
        return [p for p in self.prototypes if p.class_name == class_name]

    def mass_of(self, class_name: str) -> float | None:
        protos = self.by_class(class_name)
        return protos[0].mass if protos else None

    def copy(self) -> AssetLibrary:
        return AssetLibrary(list(self.prototypes))

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "prototypes": [asdict(p) for p in self.prototypes]}

    @classmethod
    def from_dict(cls, d: dict) -> AssetLibrary:
        return cls([AssetPrototype(**p) for p in d["prototypes"]])


@dataclass(eq=False)
class SceneGraph:
    nodes: list
    edges: list
    walls: np.ndarray  # bool [row, col]
    cell_size: float = 0.25

    @property
    def extent(self) -> tuple:
        return self.walls.shape[1] * self.cell_size, self.walls.shape[0] * self.cell_size

    def node(self, node_id: int) -> AssetNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def next_id(self) -> int:
        return max((n.id for n in self.nodes), default=-1) + 1

    def copy(self) -> SceneGraph:
        return SceneGraph([AssetNode(**asdict(n)) for n in self.nodes], list(self.edges), self.walls.copy(),
                          self.cell_size)

    def validate(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise InvalidScene("duplicate node ids")
        w, h = self.extent
        for n in self.nodes:
            cx, cy, hw, hh = n.bbox
            if not (hw > 0 and hh > 0):
                raise InvalidScene(f"node {n.id} has non-positive extent")
            if not (0 <= cx - hw and cx + hw <= w and 0 <= cy - hh and cy + hh <= h):
                raise InvalidScene(f"node {n.id} lies outside the scene extent")
        idset = set(ids)
        for e in self.edges:
            if e.src == e.dst or e.src not in idset or e.dst not in idset:
                raise InvalidScene(f"edge {e} references missing nodes")
        for i, a in enumerate(self.nodes):
            for b in self.nodes[i + 1:]:
                if a.class_name == b.class_name and math.dist(a.center, b.center) < CLUSTER_RADIUS:
                    raise InvalidScene(f"nodes {a.id} and {b.id} of class {a.class_name} are too close")

    def structure(self) -> tuple:
        """Hashable summary used for structural equality."""
        nodes = tuple((n.id, n.class_name, n.color, n.bbox, n.support_height, n.provenance, n.mass)
                      for n in self.nodes)
        edges = tuple((e.src, e.dst, e.relation, e.distance) for e in self.edges)
        return nodes, edges, self.walls.shape, self.walls.tobytes(), self.cell_size

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "cell_size": self.cell_size,
            "extent": list(self.extent),
            "shape": list(self.walls.shape),
            "walls_rle": rle_encode(self.walls.astype(np.uint8)),
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [asdict(e) for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneGraph:
        walls = rle_decode(d["walls_rle"], tuple(d["shape"])).astype(bool)
        return cls([AssetNode.from_dict(n) for n in d["nodes"]], [RelationEdge(**e) for e in d["edges"]], walls,
                   float(d["cell_size"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> SceneGraph:
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# reconstruction
# --------------------------------------------------------------------------
def cluster_semantic_hits(hits, radius: float = CLUSTER_RADIUS) -> list:
    """Single-linkage clusters of same-class hits within ``radius``; WALL hits excluded.

    ``hits`` is a list of SemanticHit or an ExplorationLog. Clusters are lists
    of hits, ordered by the step of their first hit (then list position).
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    if hasattr(hits, "belief"):
        hits = hits.belief.semantic_hits
    hits = [h for h in hits if h.class_name not in (None, WALL_TOKEN)]
    if not hits:
        return []
    pts = np.array([h.point for h in hits], dtype=float)
    names = np.array([h.class_name for h in hits])
    rows, cols = [], []
    for name in sorted(set(names.tolist())):
        idx = np.flatnonzero(names == name)
        pairs = cKDTree(pts[idx]).query_pairs(radius, output_type="ndarray")
        if len(pairs):
            rows.append(idx[pairs[:, 0]])
            cols.append(idx[pairs[:, 1]])
    n = len(hits)
    r = np.concatenate(rows) if rows else np.zeros(0, int)
    c = np.concatenate(cols) if cols else np.zeros(0, int)
    graph = coo_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    ordered = sorted(groups.values(), key=lambda g: (min(hits[i].step for i in g), g[0]))
    return [[hits[i] for i in g] for g in ordered]


def _majority(values) -> str | None:
    counts = Counter(values)
    # most frequent; ties go to the value seen first
    best = max(counts.values())
    for v in values:
        if counts[v] == best:
            return v
    return None


def node_from_hits(node_id: int, hits: list, provenance: str = EXPLORED, extent=None) -> AssetNode:
    pts = np.array([h.point for h in hits], dtype=float)
    lo = pts.min(axis=0) - BBOX_PAD
    hi = pts.max(axis=0) + BBOX_PAD
    if extent is not None:
        lo = np.maximum(lo, 0.0)
        hi = np.minimum(hi, extent)
    cx, cy = (lo + hi) / 2
    hw, hh = (hi - lo) / 2
    support = SURFACE if max(hw, hh) <= SURFACE_MAX_HALF else FLOOR
    return AssetNode(node_id, _majority([h.class_name for h in hits]), _majority([h.color for h in hits]),
                     (cx, cy, hw, hh), support, provenance)


def reconstruct_scene(log, min_hits: int = MIN_HITS, radius: float = CLUSTER_RADIUS) -> SceneGraph:
    """Walls from WALL-labelled occupied cells, one node per hit cluster with at least ``min_hits`` hits.

    Cells never observed and not covered by a node are closed as walls so the
    sim world has no openings into unmapped space.
    """
    if not log.records:
        raise EmptyLog("exploration log has no records")
    belief = log.belief
    occupied = belief.known_occupied()
    unknown = belief.unknown()
    wall_hit = np.zeros(belief.shape, dtype=bool)
    for h in belief.semantic_hits:
        if h.class_name == WALL_TOKEN and h.cell[0] >= 0:
            wall_hit[h.cell] = True
    extent = np.array([belief.shape[1] * belief.cell_size, belief.shape[0] * belief.cell_size])
    nodes = []
    for group in cluster_semantic_hits(belief.semantic_hits, radius):
        if len(group) >= min_hits:
            nodes.append(node_from_hits(len(nodes), group, EXPLORED, extent))
    covered = np.zeros(belief.shape, dtype=bool)
    for n in nodes:
        covered |= bbox_cells(n.bbox, belief.cell_size, belief.shape)
    walls = (occupied & wall_hit) | (unknown & ~covered)
    return SceneGraph(nodes, relation_edges(nodes), walls, belief.cell_size)


def bbox_cells(bbox, cell: float, shape: tuple) -> np.ndarray:
    """Cells intersecting the box interior."""
    cx, cy, hw, hh = bbox
    mask = np.zeros(shape, dtype=bool)
    c0 = max(0, int(math.floor((cx - hw) / cell)))
    c1 = min(shape[1] - 1, int(math.ceil((cx + hw) / cell)) - 1)
    r0 = max(0, int(math.floor((cy - hh) / cell)))
    r1 = min(shape[0] - 1, int(math.ceil((cy + hh) / cell)) - 1)
    if c1 >= c0 and r1 >= r0:
        mask[r0:r1 + 1, c0:c1 + 1] = True
    return mask


# --------------------------------------------------------------------------
# relations
# --------------------------------------------------------------------------
def boundary_gap(a: AssetNode, b: AssetNode) -> float:
    """Centre distance minus both boxes' half-extents projected on the centre line."""
    dx, dy = b.bbox[0] - a.bbox[0], b.bbox[1] - a.bbox[1]
    d = math.hypot(dx, dy)
    if d == 0:
        return 0.0
    ux, uy = abs(dx) / d, abs(dy) / d
    proj = a.bbox[2] * ux + a.bbox[3] * uy + b.bbox[2] * ux + b.bbox[3] * uy
    return max(0.0, d - proj)


def overlap_fraction(a: AssetNode, b: AssetNode) -> float:
    """Intersection area over the smaller box area."""
    ax0, ay0, ax1, ay1 = a.bounds()
    bx0, by0, bx1, by1 = b.bounds()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    smaller = min((ax1 - ax0) * (ay1 - ay0), (bx1 - bx0) * (by1 - by0))
    return iw * ih / smaller if smaller > 0 else 0.0


def relation_edges(nodes: list) -> list:
    edges = []
    for a in nodes:
        for b in nodes:
            if a.id == b.id:
                continue
            gap = boundary_gap(a, b)
            if (a.support_height == SURFACE and b.support_height == FLOOR
                    and overlap_fraction(a, b) >= ON_TOP_OVERLAP):
                edges.append(RelationEdge(a.id, b.id, ON_TOP_OF, gap))
            elif gap <= ADJACENT_GAP:
                edges.append(RelationEdge(a.id, b.id, ADJACENT, gap))
            elif gap <= NEAR_GAP:
                edges.append(RelationEdge(a.id, b.id, NEAR, gap))
    return edges


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------
@dataclass
class AugmentParams:
    jitter: float = 0.25
    retries: int = 20
    swap_prob: float = 0.2
    insert_prob: float = 0.5
    insert_attempts: int = 50


def _overlaps(a_bbox, b_bbox) -> bool:
    ax, ay, aw, ah = a_bbox
    bx, by, bw, bh = b_bbox
    return abs(ax - bx) < aw + bw and abs(ay - by) < ah + bh


def placement_ok(scene: SceneGraph, bbox: tuple, others: list) -> bool:
    """Inside the extent, clear of wall cells and of every box in ``others``."""
    cx, cy, hw, hh = bbox
    w, h = scene.extent
    if cx - hw < 0 or cy - hh < 0 or cx + hw > w or cy + hh > h:
        return False
    if (scene.walls & bbox_cells(bbox, scene.cell_size, scene.walls.shape)).any():
        return False
    return not any(_overlaps(bbox, o) for o in others)


def augment_scene(scene: SceneGraph, library: AssetLibrary, n_variants: int, seed: int,
                  params: AugmentParams | None = None) -> list:
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    params = params or AugmentParams()
    protos = list(library.prototypes)
    out = []
    for v in range(n_variants):
        rng = stream(seed, "augment", v)
        nodes = [AssetNode(**asdict(n)) for n in scene.nodes]
        for i, node in enumerate(nodes):
            others = [n.bbox for j, n in enumerate(nodes) if j != i]
            cx, cy, hw, hh = node.bbox
            for _ in range(params.retries):
                jx, jy = rng.uniform(-params.jitter, params.jitter, 2)
                cand = (cx + jx, cy + jy, hw, hh)
                if placement_ok(scene, cand, others):
                    if (jx, jy) != (0.0, 0.0):
                        node.bbox = cand
                        node.provenance = AUGMENTED
                    break
            if protos and rng.random() < params.swap_prob:
                p = protos[int(rng.integers(len(protos)))]
                cand = (node.bbox[0], node.bbox[1], p.half_w, p.half_h)
                if placement_ok(scene, cand, others):
                    node.class_name, node.color, node.mass = p.class_name, p.color, p.mass
                    node.bbox = cand
                    node.support_height = SURFACE if max(p.half_w, p.half_h) <= SURFACE_MAX_HALF else FLOOR
                    node.provenance = AUGMENTED
        if protos and rng.random() < params.insert_prob:
            p = protos[int(rng.integers(len(protos)))]
            w, h = scene.extent
            for _ in range(params.insert_attempts):
                cand = (rng.uniform(p.half_w, w - p.half_w), rng.uniform(p.half_h, h - p.half_h), p.half_w, p.half_h)
                same = [n for n in nodes if n.class_name == p.class_name]
                if (placement_ok(scene, cand, [n.bbox for n in nodes])
                        and all(math.dist(n.center, cand[:2]) >= CLUSTER_RADIUS for n in same)):
                    support = SURFACE if max(p.half_w, p.half_h) <= SURFACE_MAX_HALF else FLOOR
                    nodes.append(AssetNode(max((n.id for n in nodes), default=-1) + 1, p.class_name, p.color, cand,
                                           support, AUGMENTED, p.mass))
                    break
        out.append(SceneGraph(nodes, relation_edges(nodes), scene.walls.copy(), scene.cell_size))
    return out


# --------------------------------------------------------------------------
# instantiation
# --------------------------------------------------------------------------
def scene_to_simworld(scene: SceneGraph, sensor: SensorSpec | None = None,
                      library: AssetLibrary | None = None) -> World:
    try:
        scene.validate()
    except InvalidScene:
        raise
    except Exception as exc:  # malformed fields
        raise InvalidScene(str(exc)) from exc
    grid = np.where(scene.walls, CellState.WALL, CellState.FREE).astype(np.uint8)
    objects = []
    for n in scene.nodes:
        mass = n.mass
        if mass is None and library is not None:
            mass = library.mass_of(n.class_name)
        if mass is None:
            mass = DEFAULT_MASS
        objects.append(SemObject(n.id, n.class_name, n.color or "none", n.center, n.radius, float(mass)))
    return World(grid, objects, sensor or SensorSpec(), [], scene.cell_size, 0)


def world_to_scene(world: World, iteration: int | None = None) -> SceneGraph:
    """Ground-truth scene of a world's active objects (reference and test helper)."""
    nodes = []
    for o in world.active_objects(iteration):
        rows, cols = object_cells(o.center, o.footprint_radius, world.cell_size, world.shape)
        hw = (cols.max() - cols.min() + 1) * world.cell_size / 2
        hh = (rows.max() - rows.min() + 1) * world.cell_size / 2
        support = SURFACE if max(hw, hh) <= SURFACE_MAX_HALF else FLOOR
        nodes.append(AssetNode(o.id, o.class_name, o.color, (o.center[0], o.center[1], hw, hh), support,
                               EXPLORED, o.mass))
    return SceneGraph(nodes, relation_edges(nodes), world.grid == CellState.WALL, world.cell_size)


def retrieve_scene(scene: SceneGraph, fixed: AssetLibrary) -> SceneGraph:
    """Snap each node's dimensions and colour to the fixed library prototype of its class.

    Classes absent from the fixed library keep their observed geometry.
    """
    out = scene.copy()
    for n in out.nodes:
        protos = fixed.by_class(n.class_name)
        if not protos:
            continue
        p = protos[0]
        n.color, n.mass = p.color, p.mass
        n.bbox = (n.bbox[0], n.bbox[1], p.half_w, p.half_h)
        n.support_height = SURFACE if max(p.half_w, p.half_h) <= SURFACE_MAX_HALF else FLOOR
    out.edges = relation_edges(out.nodes)
    return out
