import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import finite_difference_check, longdouble_loss
from lifeloop.errors import DimensionMismatch, EmptyDataset, LabelOutOfRange, NonFiniteParams
from lifeloop.planners import MANIP, NAV, Instruction, Lexicon, build_dataset
from lifeloop.policy import (ARM_SINCOS, BOW, D, FAMILY, GOAL_VIS, N_ACTIONS, PREV_ACTION, RANGES, SEPARATE, ArmObs,
                             Batch, TrainConfig, act, allowed_actions, featurize, forward, forward_raw, init_params,
                             load_policy, loss_and_grad, make_batch, save_policy, train, zero_params)
from lifeloop.scenegraph import world_to_scene
from lifeloop.world import NavAction, Scan, WorldSpec, generate_world


def no_hit_scan(n=72):
    return Scan(np.arange(n) * (360.0 / n), np.full(n, np.inf), [None] * n, [None] * n, -np.ones((n, 2), int))


GO_RED_CUP = Instruction("go to the red cup".split(), 0, {"class": 0})


def random_batch(rng, family, B=6):
    X = rng.uniform(-1, 1, (B, D))
    y = rng.integers(0, N_ACTIONS, B) if family == NAV else rng.normal(0, 0.1, (B, 3))
    return Batch(family, X, y, rng.uniform(0.5, 2.0, B))


def randomised(params, rng):
    for k in params.names():
        getattr(params, k)[...] = rng.normal(0, 0.3, getattr(params, k).shape)
    return params


# ---------------------------------------------------------------- features
def test_featurize_examples():
    lex = Lexicon.build()
    f = featurize(no_hit_scan(), GO_RED_CUP, None, NAV, lex)
    assert np.all(f[RANGES] == 1.0) and not f[GOAL_VIS].any() and not f[PREV_ACTION].any()
    assert f[BOW].sum() == 5 and tuple(f[FAMILY]) == (1.0, 0.0)
    g = featurize(ArmObs(np.zeros(3), (0.5, 0.2)), GO_RED_CUP, None, MANIP, lex)
    assert not g[RANGES].any() and not g[GOAL_VIS].any() and not g[PREV_ACTION].any()
    assert tuple(g[FAMILY]) == (0.0, 1.0)
    assert np.allclose(g[ARM_SINCOS], [0, 1, 0, 1, 0, 1])
    with pytest.raises(DimensionMismatch):
        featurize(ArmObs(np.zeros(3), (0, 0)), GO_RED_CUP, None, NAV, lex)


def test_featurize_prev_action_and_goal_sector():
    lex = Lexicon.build()
    s = no_hit_scan()
    s.ranges[0] = 1.0
    s.hit_class[0] = "cup"
    f = featurize(s, GO_RED_CUP, NavAction.LEFT_15, NAV, lex)
    assert f[RANGES][0] == pytest.approx(0.25) and f[GOAL_VIS][0] == 1.0 and f[GOAL_VIS].sum() == 1
    assert f[PREV_ACTION.start + int(NavAction.LEFT_15)] == 1.0


# ---------------------------------------------------------------- forward
def test_forward_examples():
    p = zero_params()
    nav, manip = forward(p, np.random.default_rng(0).uniform(size=D))
    assert np.allclose(nav, 1 / 7) and np.all(manip == 0)
    p.manip_b[:] = (0.5, 0.0, 0.0)
    p.manip_clip = 0.1
    _, manip = forward(p, np.zeros(D))
    assert manip == pytest.approx([0.1, 0.0, 0.0])
    with pytest.raises(DimensionMismatch):
        forward(p, np.zeros(D - 1))
    p.nav_b[0] = np.nan
    with pytest.raises(NonFiniteParams):
        forward(p, np.zeros(D))


@given(st.integers(0, 2 ** 31))
def test_forward_probabilities_and_clip(seed):
    rng = np.random.default_rng(seed)
    p = randomised(init_params(seed), rng)
    p.manip_clip = float(rng.uniform(0.01, 1.0))
    nav, manip = forward(p, rng.uniform(-1, 1, (5, D)))
    assert np.all(nav >= 0) and np.allclose(nav.sum(axis=1), 1.0)
    assert np.all(np.linalg.norm(manip, axis=1) <= p.manip_clip + 1e-12)


def test_act_tie_break_and_mask():
    p = zero_params()
    assert act(p, np.zeros(D), NAV) == NavAction.STOP
    p.nav_b[:] = np.log([1e-3, 0.9, 1e-3, 1e-3, 1e-3, 1e-3, 1e-3])
    assert act(p, np.zeros(D), NAV) == NavAction.FWD_25
    assert allowed_actions({"translation": 0.25, "rotation": 15.0}).sum() == 4
    p.nav_clip = {"translation": 0.25, "rotation": 30.0}
    p.nav_b[:] = 0
    p.nav_b[int(NavAction.FWD_50)] = 5.0
    assert act(p, np.zeros(D), NAV) != NavAction.FWD_50


# ---------------------------------------------------------------- loss and gradient
def test_loss_zero_cases():
    p = zero_params()
    p.nav_b[:] = -1e3
    p.nav_b[2] = 1e3
    loss, grad = loss_and_grad(p, make_batch(NAV, [(np.zeros(D), 2)] * 3))
    assert loss == 0.0 and all(np.all(g == 0) for g in grad.arrays().values())
    p.manip_b[:] = (0.1, -0.2, 0.3)
    loss, _ = loss_and_grad(p, make_batch(MANIP, [(np.zeros(D), np.array([0.1, -0.2, 0.3]))]))
    assert loss == 0.0


def test_loss_errors():
    p = zero_params()
    with pytest.raises(EmptyDataset):
        make_batch(NAV, [])
    with pytest.raises(LabelOutOfRange):
        loss_and_grad(p, make_batch(NAV, [(np.zeros(D), 7)]))
    with pytest.raises(DimensionMismatch):
        loss_and_grad(p, Batch(NAV, np.zeros((1, 5)), np.array([0]), np.ones(1)))


@pytest.mark.parametrize("family", [NAV, MANIP])
@pytest.mark.parametrize("separate", [False, True])
@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_longdouble_differences(family, separate, seed):
    rng = np.random.default_rng(seed)
    p = randomised(init_params(seed, hidden=16, separate=separate), rng)
    b = random_batch(rng, family)
    loss, grad = loss_and_grad(p, b)
    assert loss == pytest.approx(float(longdouble_loss(p.arrays(), family, b.features, b.labels, b.weights)),
                                 rel=1e-12)
    err = finite_difference_check(grad.arrays(), p.arrays(), family, b.features, b.labels, b.weights, coords=24,
                                  seed=seed)
    assert err < 1e-4


# ---------------------------------------------------------------- training
@pytest.fixture(scope="module")
def nav_dataset():
    w = generate_world(WorldSpec(16, 16, object_count=3, seed=4))
    return build_dataset([(w, world_to_scene(w))], 200, 0, seed=1)


def test_train_zero_epochs(nav_dataset):
    init = init_params(3)
    params, report = train(nav_dataset, init, TrainConfig(epochs=0), Lexicon.build())
    assert report.epochs == 0 and report.nav_loss == []
    assert params.checksum() == init.checksum()


def test_train_deterministic(nav_dataset):
    cfg = TrainConfig(epochs=2, seed=5)
    a = train(nav_dataset, None, cfg, Lexicon.build())[1].checksum
    assert a == train(nav_dataset, None, cfg, Lexicon.build())[1].checksum


def test_train_reduces_loss(nav_dataset):
    ratios = []
    for seed in range(5):
        _, rep = train(nav_dataset, None, TrainConfig(epochs=30, seed=seed), Lexicon.build())
        ratios.append(rep.nav_loss[-1] / rep.nav_loss[0])
    assert np.mean(ratios) < 0.5


def test_train_separate_and_empty(nav_dataset):
    params, rep = train(nav_dataset, init_params(0), TrainConfig(epochs=1, mode=SEPARATE), Lexicon.build())
    assert params.separate and rep.mode == SEPARATE
    from lifeloop.planners import Dataset
    with pytest.raises(EmptyDataset):
        train(Dataset(), None, TrainConfig(), Lexicon.build())
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_policy_file_round_trip(tmp_path):
    p = init_params(2, separate=True)
    lex = Lexicon.build()
    save_policy(tmp_path / "policy.json", p, lex)
    q, lex2 = load_policy(tmp_path / "policy.json")
    assert q.checksum() == p.checksum() and lex2.to_dict() == lex.to_dict()
    x = np.random.default_rng(0).uniform(size=D)
    assert np.array_equal(forward_raw(p, x)[1], forward_raw(q, x)[1])
