"""Shared-trunk behaviour-cloning policy with a navigation classifier and an arm-delta regressor."""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, LabelOutOfRange, NonFiniteParams
from .planners import MANIP, NAV, Instruction, Lexicon
from .rng import stream
from .world import PRIMITIVES, NavAction, Scan, forward_kinematics

D = 128
HIDDEN = 64
N_ACTIONS = 7
N_JOINTS = 3
N_SECTORS = 16
SECTOR_DEG = 360.0 / N_SECTORS

# feature layout
RANGES = slice(0, 16)
GOAL_VIS = slice(16, 32)
PREV_ACTION = slice(32, 39)
ARM_SINCOS = slice(39, 45)
EE_TO_TARGET = slice(45, 47)
BOW = slice(47, 111)
FAMILY = slice(111, 113)

SCHEMA_VERSION = 1
DEFAULT_NAV_CLIP = {"translation": 0.5, "rotation": 30.0}
DEFAULT_MANIP_CLIP = 0.2


@dataclass
class ArmObs:
    config: np.ndarray
    target: tuple
    link_lengths: tuple = (0.3, 0.25, 0.2)


def target_token(instruction: Instruction) -> str | None:
    """Token naming the instruction's target class."""
    if not instruction.tokens:
        return None
    return instruction.tokens[3] if instruction.template_id == 1 else instruction.tokens[-1]


def featurize(obs, instruction: Instruction, prev_action, task_family: str, lexicon: Lexicon,
              max_range: float = 4.0, unknown: Counter | None = None) -> np.ndarray:
    f = np.zeros(D)
    if task_family == NAV:
        if not isinstance(obs, Scan):
            raise DimensionMismatch("navigation features need a Scan")
        ranges = np.minimum(np.asarray(obs.ranges, dtype=float) / max_range, 1.0)  # inf -> 1.0
        sectors = (np.asarray(obs.bearings, dtype=float) // SECTOR_DEG).astype(int) % N_SECTORS
        rng_feat = np.ones(N_SECTORS)
        np.minimum.at(rng_feat, sectors, ranges)
        f[RANGES] = rng_feat
        goal = target_token(instruction)
        if goal is not None:
            hit = np.array([c is not None and c.lower() == goal for c in obs.hit_class], dtype=bool)
            vis = np.zeros(N_SECTORS)
            vis[np.unique(sectors[hit])] = 1.0
            f[GOAL_VIS] = vis
        if prev_action is not None:
            f[PREV_ACTION.start + int(prev_action)] = 1.0
        f[FAMILY] = (1.0, 0.0)
    elif task_family == MANIP:
        if not isinstance(obs, ArmObs):
            raise DimensionMismatch("manipulation features need an ArmObs")
        q = np.asarray(obs.config, dtype=float)
        f[ARM_SINCOS] = np.stack([np.sin(q), np.cos(q)], axis=1).ravel()
        _, ee = forward_kinematics(q, obs.link_lengths)
        f[EE_TO_TARGET] = np.asarray(obs.target, dtype=float) - ee
        f[FAMILY] = (0.0, 1.0)
    else:
        raise ValueError(f"unknown task family {task_family}")
    for tok in instruction.tokens:
        k = lexicon.index(tok)
        if k is None:
            if unknown is not None:
                unknown[tok] += 1
            continue
        f[BOW.start + k] = 1.0
    return f


# --------------------------------------------------------------------------
# parameters and forward pass
# --------------------------------------------------------------------------
_ARRAYS = ("trunk_w", "trunk_b", "nav_w", "nav_b", "manip_w", "manip_b")


@dataclass
class PolicyParams:
    trunk_w: np.ndarray  # D x H
    trunk_b: np.ndarray
    nav_w: np.ndarray  # H x 7
    nav_b: np.ndarray
    manip_w: np.ndarray  # H x 3
    manip_b: np.ndarray
    manip_trunk_w: np.ndarray | None = None  # SEPARATE mode only
    manip_trunk_b: np.ndarray | None = None
    nav_clip: dict = field(default_factory=lambda: dict(DEFAULT_NAV_CLIP))
    manip_clip: float = DEFAULT_MANIP_CLIP

    @property
    def separate(self) -> bool:
        return self.manip_trunk_w is not None

    def names(self) -> tuple:
        return _ARRAYS + (("manip_trunk_w", "manip_trunk_b") if self.separate else ())

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in self.names()}

    def copy(self) -> PolicyParams:
        return PolicyParams(*(getattr(self, k).copy() for k in _ARRAYS),
                            None if self.manip_trunk_w is None else self.manip_trunk_w.copy(),
                            None if self.manip_trunk_b is None else self.manip_trunk_b.copy(),
                            dict(self.nav_clip), self.manip_clip)

    def zeros_like(self) -> PolicyParams:
        z = self.copy()
        for k in self.names():
            setattr(z, k, np.zeros_like(getattr(self, k)))
        return z

    def check_finite(self):
        for k in self.names():
            if not np.all(np.isfinite(getattr(self, k))):
                raise NonFiniteParams(f"parameter {k} has non-finite entries")
        if not (self.manip_clip > 0 and all(v > 0 for v in self.nav_clip.values())):
            raise NonFiniteParams("action clip must be positive")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in self.names():
            h.update(np.ascontiguousarray(getattr(self, k), dtype=np.float64).tobytes())
        return h.hexdigest()

    def to_dict(self, lexicon: Lexicon | None = None) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "layout": {"D": D, "H": int(self.trunk_w.shape[1]), "n_actions": N_ACTIONS, "n_joints": N_JOINTS},
            "weights": {k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
                        for k, v in self.arrays().items()},
            "action_clip": {"nav": dict(self.nav_clip), "manip": self.manip_clip},
            "lexicon": None if lexicon is None else lexicon.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> PolicyParams:
        w = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["weights"].items()}
        return cls(w["trunk_w"], w["trunk_b"], w["nav_w"], w["nav_b"], w["manip_w"], w["manip_b"],
                   w.get("manip_trunk_w"), w.get("manip_trunk_b"), dict(d["action_clip"]["nav"]),
                   float(d["action_clip"]["manip"]))


def init_params(seed: int, hidden: int = HIDDEN, separate: bool = False) -> PolicyParams:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = stream(seed, "policy-init")

    def u(fan_in, shape):
        b = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-b, b, shape)

    p = PolicyParams(u(D, (D, hidden)), np.zeros(hidden), u(hidden, (hidden, N_ACTIONS)), np.zeros(N_ACTIONS),
                     u(hidden, (hidden, N_JOINTS)), np.zeros(N_JOINTS))
    if separate:
        p.manip_trunk_w = u(D, (D, hidden))
        p.manip_trunk_b = np.zeros(hidden)
    return p


def zero_params(hidden: int = HIDDEN) -> PolicyParams:
    return PolicyParams(np.zeros((D, hidden)), np.zeros(hidden), np.zeros((hidden, N_ACTIONS)), np.zeros(N_ACTIONS),
                        np.zeros((hidden, N_JOINTS)), np.zeros(N_JOINTS))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def clip_norm(v: np.ndarray, bound: float) -> np.ndarray:
    """Scale rows down so their 2-norm is at most ``bound``."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.where(n > bound, bound / np.where(n > 0, n, 1.0), 1.0)
    return v * scale


def _manip_trunk(params: PolicyParams) -> tuple:
    if params.separate:
        return params.manip_trunk_w, params.manip_trunk_b
    return params.trunk_w, params.trunk_b


def forward_raw(params: PolicyParams, features: np.ndarray) -> tuple:
    """(nav probabilities, pre-clip manip outputs); accepts one vector or a batch."""
    f = np.asarray(features, dtype=float)
    if f.shape[-1] != D:
        raise DimensionMismatch(f"expected {D} features, got {f.shape[-1]}")
    h = np.tanh(f @ params.trunk_w + params.trunk_b)
    nav = softmax(h @ params.nav_w + params.nav_b)
    mw, mb = _manip_trunk(params)
    hm = h if not params.separate else np.tanh(f @ mw + mb)
    return nav, hm @ params.manip_w + params.manip_b


def forward(params: PolicyParams, features: np.ndarray) -> tuple:
    params.check_finite()
    nav, manip = forward_raw(params, features)
    return nav, clip_norm(manip, params.manip_clip)


# --------------------------------------------------------------------------
# loss and gradient
# --------------------------------------------------------------------------
@dataclass
class Batch:
    family: str
    features: np.ndarray  # B x D
    labels: np.ndarray  # B ints (nav) or B x 3 (manip)
    weights: np.ndarray  # B


def make_batch(family: str, samples: list, weights=None) -> Batch:
    """``samples`` is a list of (features, label)."""
    if not samples:
        raise EmptyDataset("batch must be nonempty")
    X = np.stack([np.asarray(s[0], dtype=float) for s in samples])
    if family == NAV:
        y = np.array([int(s[1]) for s in samples])
    else:
        y = np.stack([np.asarray(s[1], dtype=float) for s in samples])
    w = np.ones(len(samples)) if weights is None else np.asarray(weights, dtype=float)
    return Batch(family, X, y, w)


def loss_and_grad(params: PolicyParams, batch: Batch) -> tuple:
    """Weighted mean cross-entropy (NAV) or mean squared error (MANIP) and its exact gradient."""
    X, y, w = batch.features, batch.labels, batch.weights
    B = X.shape[0]
    if B == 0:
        raise EmptyDataset("batch must be nonempty")
    if X.shape[1] != D:
        raise DimensionMismatch(f"expected {D} features, got {X.shape[1]}")
    grad = params.zeros_like()
    if batch.family == NAV:
        if np.any(y < 0) or np.any(y >= N_ACTIONS):
            raise LabelOutOfRange("navigation label outside 0..6")
        h = np.tanh(X @ params.trunk_w + params.trunk_b)
        p = softmax(h @ params.nav_w + params.nav_b)
        picked = p[np.arange(B), y]
        loss = float(np.sum(w * -np.log(np.maximum(picked, 1e-300))) / B)
        dz = p.copy()
        dz[np.arange(B), y] -= 1.0
        dz *= (w / B)[:, None]
        grad.nav_w = h.T @ dz
        grad.nav_b = dz.sum(axis=0)
        dh = (dz @ params.nav_w.T) * (1.0 - h * h)
        grad.trunk_w = X.T @ dh
        grad.trunk_b = dh.sum(axis=0)
    elif batch.family == MANIP:
        if y.ndim != 2 or y.shape[1] != N_JOINTS:
            raise LabelOutOfRange("manipulation labels must be 3-vectors")
        tw, tb = _manip_trunk(params)
        h = np.tanh(X @ tw + tb)
        out = h @ params.manip_w + params.manip_b
        err = out - y
        loss = float(np.sum(w * np.mean(err * err, axis=1)) / B)
        dout = err * (2.0 / N_JOINTS) * (w / B)[:, None]
        grad.manip_w = h.T @ dout
        grad.manip_b = dout.sum(axis=0)
        dh = (dout @ params.manip_w.T) * (1.0 - h * h)
        if params.separate:
            grad.manip_trunk_w = X.T @ dh
            grad.manip_trunk_b = dh.sum(axis=0)
        else:
            grad.trunk_w = X.T @ dh
            grad.trunk_b = dh.sum(axis=0)
    else:
        raise ValueError(f"unknown task family {batch.family}")
    return loss, grad


def loss_only(params: PolicyParams, batch: Batch) -> float:
    return loss_and_grad(params, batch)[0]


def gradient_check(params: PolicyParams, batch: Batch, eps: float = 1e-5, coords: int | None = None,
                   rng: np.random.Generator | None = None, floor: float = 1e-8) -> float:
    """Max relative error |a - n| / max(|a| + |n|, floor) of analytic vs central differences.

    ``coords`` limits the check to that many random entries per array.
    """
    _, grad = loss_and_grad(params, batch)
    worst = 0.0
    for name in params.names():
        arr = getattr(params, name)
        g = getattr(grad, name)
        flat_idx = np.arange(arr.size)
        if coords is not None and arr.size > coords:
            flat_idx = (rng or np.random.default_rng(0)).choice(arr.size, coords, replace=False)
        for k in flat_idx:
            idx = np.unravel_index(k, arr.shape)
            old = arr[idx]
            arr[idx] = old + eps
            lp = loss_only(params, batch)
            arr[idx] = old - eps
            lm = loss_only(params, batch)
            arr[idx] = old
            num = (lp - lm) / (2 * eps)
            rel = abs(g[idx] - num) / max(abs(g[idx]) + abs(num), floor)
            worst = max(worst, rel)
    return worst


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------
JOINT, SEPARATE = "JOINT", "SEPARATE"


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    mode: str = JOINT
    hidden: int = HIDDEN

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in (JOINT, SEPARATE):
            raise ValueError(f"unknown training mode {self.mode}")


@dataclass
class TrainReport:
    epochs: int
    nav_loss: list
    manip_loss: list
    checksum: str
    grad_check: float | None
    mode: str
    n_samples: dict

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "nav_loss": self.nav_loss, "manip_loss": self.manip_loss,
                "checksum": self.checksum, "grad_check_max_rel_error": self.grad_check, "mode": self.mode,
                "n_samples": self.n_samples}


def episode_samples(episode, lexicon: Lexicon, max_range: float = 4.0, link_lengths=(0.3, 0.25, 0.2),
                    unknown: Counter | None = None) -> list:
    """(features, label) pairs of one episode; arm episodes end with a zero-delta hold sample."""
    traj = episode.trajectory
    ins = episode.instruction
    out = []
    if episode.task_family == NAV:
        prev = None
        for step in traj.steps:
            out.append((featurize(step.scan, ins, prev, NAV, lexicon, max_range, unknown), int(step.action)))
            prev = step.action
    else:
        target = traj.task.target
        for q, d in zip(traj.configs, traj.deltas):
            out.append((featurize(ArmObs(q, target, link_lengths), ins, None, MANIP, lexicon, unknown=unknown),
                        np.asarray(d, dtype=float)))
        out.append((featurize(ArmObs(traj.final_config, target, link_lengths), ins, None, MANIP, lexicon,
                              unknown=unknown), np.zeros(N_JOINTS)))
    return out


def dataset_arrays(dataset, lexicon: Lexicon, max_range: float = 4.0) -> dict:
    """Stacked per-family (X, y, w) arrays in episode order."""
    out = {}
    for fam in (NAV, MANIP):
        X, y, w = [], [], []
        for ep in dataset.family(fam):
            for feat, label in episode_samples(ep, lexicon, max_range):
                X.append(feat)
                y.append(label)
                w.append(ep.weight)
        if X:
            out[fam] = (np.stack(X), np.array(y) if fam == NAV else np.stack(y), np.array(w, dtype=float))
    return out


def _sgd(params: PolicyParams, grad: PolicyParams, lr: float):
    for k in grad.names():
        getattr(params, k)[...] -= lr * getattr(grad, k)


def train(dataset, init: PolicyParams | None, config: TrainConfig, lexicon: Lexicon, max_range: float = 4.0,
          arrays: dict | None = None) -> tuple:
    """Mini-batch gradient descent; JOINT interleaves family batches, SEPARATE uses disjoint trunks."""
    arrays = arrays if arrays is not None else dataset_arrays(dataset, lexicon, max_range)
    if not arrays:
        raise EmptyDataset("dataset has no episodes")
    separate = config.mode == SEPARATE
    if init is None:
        params = init_params(config.seed, config.hidden, separate)
    else:
        params = init.copy()
        if separate and not params.separate:
            params.manip_trunk_w = params.trunk_w.copy()
            params.manip_trunk_b = params.trunk_b.copy()
    params.check_finite()
    rng = stream(config.seed, "train")
    grad_check = None
    nav_hist, manip_hist = [], []
    for epoch in range(config.epochs):
        batches = []
        for fam in (NAV, MANIP):
            if fam not in arrays:
                continue
            X, y, w = arrays[fam]
            perm = rng.permutation(len(X))
            for s in range(0, len(X), config.batch_size):
                idx = perm[s:s + config.batch_size]
                batches.append(Batch(fam, X[idx], y[idx], w[idx]))
        order = rng.permutation(len(batches))
        if epoch == 0:
            first = batches[int(order[0])]
            grad_check = gradient_check(params.copy(), first, coords=4, rng=stream(config.seed, "train-gc"))
        sums = {NAV: [0.0, 0], MANIP: [0.0, 0]}
        for b in order:
            batch = batches[int(b)]
            loss, grad = loss_and_grad(params, batch)
            _sgd(params, grad, config.learning_rate)
            sums[batch.family][0] += loss * len(batch.features)
            sums[batch.family][1] += len(batch.features)
        nav_hist.append(sums[NAV][0] / sums[NAV][1] if sums[NAV][1] else None)
        manip_hist.append(sums[MANIP][0] / sums[MANIP][1] if sums[MANIP][1] else None)
    params.check_finite()
    report = TrainReport(config.epochs, nav_hist, manip_hist, params.checksum(), grad_check, config.mode,
                         {fam: int(len(arrays[fam][0])) for fam in arrays})
    return params, report


# --------------------------------------------------------------------------
# acting
# --------------------------------------------------------------------------
def allowed_actions(nav_clip: dict) -> np.ndarray:
    """Primitives within the translation/rotation clip."""
    mask = np.zeros(N_ACTIONS, dtype=bool)
    for a, (trans, rot) in PRIMITIVES.items():
        mask[int(a)] = trans <= nav_clip["translation"] + 1e-12 and abs(rot) <= nav_clip["rotation"] + 1e-12
    return mask


def act(params: PolicyParams, features: np.ndarray, task_family: str, greedy: bool = True,
        rng: np.random.Generator | None = None):
    nav, manip = forward(params, features)
    if task_family == MANIP:
        return manip
    mask = allowed_actions(params.nav_clip)
    probs = np.where(mask, nav, 0.0)
    if greedy:
        return NavAction(int(np.argmax(probs)))  # first maximum: lowest index wins ties
    if rng is None:
        raise ValueError("sampling needs an RNG stream")
    probs = probs / probs.sum()
    return NavAction(int(rng.choice(N_ACTIONS, p=probs)))


def save_policy(path, params: PolicyParams, lexicon: Lexicon | None = None):
    with open(path, "w") as f:
        json.dump(params.to_dict(lexicon), f, sort_keys=True)


def load_policy(path) -> tuple:
    with open(path) as f:
        d = json.load(f)
    lex = Lexicon.from_dict(d["lexicon"]) if d.get("lexicon") else None
    return PolicyParams.from_dict(d), lex
