"""Command-line entry point: one subcommand per lifecycle stage plus the full loop and a report."""
from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, LifeloopError
from .explore import ExplorationLog, ExploreParams, explore
from .feedback import FeedbackWeights, Limits
from .lifecycle import (EvalTasks, LifecycleConfig, Report, evaluate, exploration_start, feedback_summary,
                        gather_feedback, load_history, run_lifecycle, sample_eval_tasks)
from .planners import Dataset, Lexicon, arm_world_from_scene, build_dataset
from .policy import load_policy, save_policy, train
from .rng import derive_seed
from .scenegraph import (AssetLibrary, SceneGraph, augment_scene, reconstruct_scene, scene_to_simworld)
from .world import World, generate_world

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _dump(path: str, obj):
    _write(path, json.dumps(obj, sort_keys=True))


def _write(path: str, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def _read(path: str) -> str:
    try:
        with open(path) as f:
            return f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _config(args) -> LifecycleConfig:
    cfg = LifecycleConfig.load(args.config) if args.config else LifecycleConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out_dir"] = args.out
    return LifecycleConfig.from_dict(d)


def _out(args) -> str:
    return args.out if args.out is not None else "."


def _library(args, cfg: LifecycleConfig) -> AssetLibrary:
    if getattr(args, "library", None):
        return AssetLibrary.from_dict(json.loads(_read(args.library)))
    return AssetLibrary.from_vocabulary(cfg.world_spec().class_vocabulary)


def cmd_world_gen(args, cfg):
    world = generate_world(cfg.world_spec())
    _write(os.path.join(_out(args), "world.json"), world.to_json())


def cmd_explore(args, cfg):
    world = World.from_json(_read(args.world))
    start = exploration_start(world, cfg.seed)
    budget = args.budget if args.budget is not None else cfg.explore_budget
    log = explore(world, start, budget, ExploreParams(seed=derive_seed(cfg.seed, "explore", args.iteration),
                                                      iteration=args.iteration))
    out = _out(args)
    log.save(os.path.join(out, "exploration_log.jsonl"), os.path.join(out, "belief.json"))
    print(f"coverage {log.coverage_fraction:.4f} after {len(log.records)} steps")


def cmd_reconstruct(args, cfg):
    d = args.log
    log = ExplorationLog.load(os.path.join(d, "exploration_log.jsonl"), os.path.join(d, "belief.json"))
    scene = reconstruct_scene(log)
    _write(os.path.join(_out(args), "scene.json"), scene.to_json())
    print(f"{len(scene.nodes)} nodes, {len(scene.edges)} edges")


def cmd_augment(args, cfg):
    scene = SceneGraph.from_json(_read(args.scene))
    library = _library(args, cfg)
    n = args.n if args.n is not None else cfg.n_variants
    for k, v in enumerate(augment_scene(scene, library, n, derive_seed(cfg.seed, "augment", args.iteration))):
        _write(os.path.join(_out(args), f"variant_{k:02d}.json"), v.to_json())
    _dump(os.path.join(_out(args), "library.json"), library.to_dict())


def cmd_plan(args, cfg):
    library = _library(args, cfg)
    sensor = cfg.world_spec().sensor
    scenes = [SceneGraph.from_json(_read(p)) for p in args.scenes]
    sims = [(scene_to_simworld(s, sensor, library), s) for s in scenes]
    n_nav = args.n_nav if args.n_nav is not None else cfg.n_nav
    n_manip = args.n_manip if args.n_manip is not None else cfg.n_manip
    if not any(arm_world_from_scene(s, library).targets for s in scenes):
        n_manip = 0
    ds = build_dataset(sims, n_nav, n_manip, derive_seed(cfg.seed, "dataset", args.iteration), args.iteration,
                       library=library)
    _write(os.path.join(_out(args), "trajectories.jsonl"), ds.to_jsonl())
    print(f"{len(ds)} episodes")


def cmd_train(args, cfg):
    ds = Dataset.from_jsonl(_read(args.dataset))
    init, lexicon = (None, None)
    if args.init:
        init, lexicon = load_policy(args.init)
    lexicon = lexicon or Lexicon.build(cfg.world_spec().class_vocabulary)
    params, report = train(ds, init, cfg.train_config(args.iteration), lexicon, cfg.world_spec().sensor.max_range)
    out = _out(args)
    save_policy(os.path.join(out, "policy.json"), params, lexicon)
    _dump(os.path.join(out, "train_report.json"), report.to_dict())
    print(f"checksum {report.checksum}")


def cmd_deploy(args, cfg):
    world = World.from_json(_read(args.world))
    scene = SceneGraph.from_json(_read(args.scene))
    library = _library(args, cfg)
    params, lexicon = load_policy(args.policy)
    lexicon = lexicon or Lexicon.build(cfg.world_spec().class_vocabulary)
    if args.tasks:
        tasks = EvalTasks.from_dict(json.loads(_read(args.tasks)))
    else:
        tasks = sample_eval_tasks(world, cfg.eval_nav, cfg.eval_manip, cfg.seed, args.iteration)
    limits = Limits(**cfg.limits)
    weights = FeedbackWeights(**cfg.weights)
    metrics, nav, manip = evaluate(world, params, tasks, limits, lexicon, scene_to_simworld(scene, world.sensor, library),
                                   arm_world_from_scene(scene, library), args.iteration, cfg.seed,
                                   cfg.eval_max_steps, cfg.manip_max_steps)
    out = _out(args)
    _write(os.path.join(out, "rollouts.jsonl"),
           "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in nav + manip))
    bundle = gather_feedback(nav, manip, scene, library, weights, limits)
    _dump(os.path.join(out, "feedback.json"), feedback_summary(bundle, weights))
    _dump(os.path.join(out, "metrics.json"), metrics.to_dict())
    print(json.dumps(metrics.to_dict(), sort_keys=True))


def cmd_loop_run(args, cfg):
    if cfg.out_dir is None:
        raise ConfigError("loop run needs --out (or out_dir in the config)")
    report = run_lifecycle(cfg, resume=args.resume)
    print(report.summary(), end="")


def cmd_report(args, cfg):
    run = args.run if args.run else _out(args)
    history = load_history(run)
    if not history:
        raise ConfigError(f"no iteration metrics under {run}")
    report = Report(history, {})
    _write(os.path.join(run, "metrics.csv"), report.metrics_csv())
    _write(os.path.join(run, "summary.txt"), report.summary())
    print(report.summary(), end="")


def _globals(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="LifecycleConfig JSON file")
    parser.add_argument("--seed", type=int, default=default, help="master seed (overrides the config)")
    parser.add_argument("--out", default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lifeloop", description=__doc__)
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, parent=sub, **kw):
        p = parent.add_parser(name, **kw)
        _globals(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    world = sub.add_parser("world", help="world generation")
    wsub = world.add_subparsers(dest="world_command", required=True)
    add("gen", cmd_world_gen, wsub, help="generate world.json from the config's WorldSpec")

    p = add("explore", cmd_explore, help="frontier exploration of a world")
    p.add_argument("--world", required=True)
    p.add_argument("--budget", type=int)
    p.add_argument("--iteration", type=int, default=0)

    p = add("reconstruct", cmd_reconstruct, help="scene graph from an exploration log directory")
    p.add_argument("--log", required=True, help="directory holding exploration_log.jsonl and belief.json")

    p = add("augment", cmd_augment, help="scene variants")
    p.add_argument("--scene", required=True)
    p.add_argument("--library")
    p.add_argument("--n", type=int)
    p.add_argument("--iteration", type=int, default=0)

    p = add("plan", cmd_plan, help="expert trajectories over scenes")
    p.add_argument("--scenes", nargs="+", required=True)
    p.add_argument("--library")
    p.add_argument("--n-nav", type=int)
    p.add_argument("--n-manip", type=int)
    p.add_argument("--iteration", type=int, default=0)

    p = add("train", cmd_train, help="behaviour cloning on a trajectory file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--init", help="warm-start policy.json")
    p.add_argument("--iteration", type=int, default=0)

    p = add("deploy", cmd_deploy, help="evaluate a policy in a world and compute feedback")
    p.add_argument("--world", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--library")
    p.add_argument("--tasks", help="eval_tasks.json; sampled from the world when omitted")
    p.add_argument("--iteration", type=int, default=0)

    loop = sub.add_parser("loop", help="full lifecycle")
    lsub = loop.add_subparsers(dest="loop_command", required=True)
    p = add("run", cmd_loop_run, lsub, help="run all iterations")
    p.add_argument("--resume", action="store_true", help="continue from checkpoint.json in --out")

    p = add("report", cmd_report, help="metrics.csv and summary from a run directory")
    p.add_argument("--run", help="run directory (defaults to --out)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LifeloopError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (KeyError, TypeError, ValueError) as exc:
        print(f"config error: malformed input ({type(exc).__name__}: {exc})", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
