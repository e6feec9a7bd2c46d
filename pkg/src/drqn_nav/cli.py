"""Command line entry point: ``drqn-nav {train,eval,render}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .agent import DRQNAgent, GreedyPolicy, TrainingDiverged, write_train_log
from .config import ConfigError, RunConfig, load_config_file, merge, output_root, preset_config, resolve_config
from .env import NavEnv, write_trace_csv
from .metrics import (SCENARIO_KINDS, RandomPolicy, compute_metrics, emit_report, format_report, run_episode,
                      run_episodes)
from .neural.checkpoint import FORMAT_VERSION, CheckpointError, load_checkpoint
from .neural.network import check_params
from .perception import costmap_to_image, write_pgm
from .world import ROBOT_RADIUS, Box, Cylinder, World, generate_scenario, overlaps_body

log = logging.getLogger("drqn_nav")

RESOLVED_CONFIG = "resolved_config.json"
TRAIN_LOG = "train_log.csv"


class UsageError(Exception):
    pass


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def make_agent(cfg: RunConfig, out_dir=None) -> DRQNAgent:
    return DRQNAgent(cfg.trainer(), cfg.arch(), cfg.scenario(), cfg.camera(), seed=cfg.seed, out_dir=out_dir,
                     env_kwargs=dict(perception=cfg.perception()))


def make_env(cfg: RunConfig, **kw) -> NavEnv:
    return NavEnv(cfg.camera(), max_steps=cfg.episode_length, perception=cfg.perception(), **kw)


def _run_config_for(args) -> RunConfig:
    """Config for eval/render: explicit flags, else the snapshot beside the checkpoint."""
    if args.config is not None:
        return resolve_config(args.preset, args.config)
    snap = Path(args.checkpoint).parent / RESOLVED_CONFIG
    if args.preset is None and snap.exists():
        return merge(preset_config(load_config_file(snap).get("preset", "paper")), load_config_file(snap))
    return preset_config(args.preset or "paper")


def _load_policy(cfg: RunConfig, path) -> GreedyPolicy:
    params, _ = load_checkpoint(path)
    arch = cfg.arch()
    check_params(params, arch)
    return GreedyPolicy(params, arch)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(args) -> int:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    cfg = resolve_config(args.preset, args.config, overrides)
    out = Path(cfg.out_dir) if cfg.out_dir else output_root() / f"{cfg.preset}_seed{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG).write_text(cfg.to_json())
    agent = make_agent(cfg, out)
    try:
        agent.fit(log_path=out / TRAIN_LOG)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}; last checkpoint kept in {out}", file=sys.stderr)
        return 2
    write_train_log(out / TRAIN_LOG, agent.log_)
    print(f"trained {agent.steps_} steps over {agent.episodes_} episodes; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config_for(args)
    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    kinds = SCENARIO_KINDS if args.scenario == "all" else (args.scenario,)
    policy = _load_policy(cfg, args.checkpoint) if args.checkpoint != "random" else None
    reports = {}
    for kind in kinds:
        env = make_env(cfg)
        if policy is None:
            logs = run_episodes(RandomPolicy(), kind, args.episodes, args.seed, scenario=cfg.scenario(), env=env,
                                jobs=args.jobs, per_seed_policy=RandomPolicy)
        else:
            logs = run_episodes(policy, kind, args.episodes, args.seed, scenario=cfg.scenario(), env=env,
                                jobs=args.jobs)
        reports[kind] = compute_metrics(logs)
        if args.traces is not None:
            _write_traces(cfg, policy, kind, args.seed, args.episodes, Path(args.traces))
    print(format_report(reports))
    if args.csv is not None:
        emit_report(reports, args.csv)
    return 0


def _write_traces(cfg, policy, kind, base_seed, n, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    env = make_env(cfg, record_trace=True)
    for s in range(base_seed, base_seed + n):
        pol = policy if policy is not None else RandomPolicy(s)
        run_episode(pol, env, generate_scenario(kind, cfg.scenario().max_level, s, cfg.scenario()), kind, s, True)
        write_trace_csv(out / f"{kind}_{s}.csv", env.trace)


WORLD_PX = 0.02
PIXEL_FREE, PIXEL_OVERHANG, PIXEL_OBSTACLE = 255, 190, 0
PIXEL_PATH, PIXEL_START, PIXEL_GOAL = 100, 40, 160


def world_to_pixel(world: World, x: float, y: float, px: float = WORLD_PX):
    """Top-down raster: row 0 is the +y edge, column 0 the -x edge."""
    xmin, ymin, xmax, ymax = world.bounds
    h = int(round((ymax - ymin) / px))
    w = int(round((xmax - xmin) / px))
    c = min(max(int((x - xmin) / px), 0), w - 1)
    r = min(max(int((ymax - y) / px), 0), h - 1)
    return r, c


def render_world(world: World, path_xy=(), px: float = WORLD_PX) -> np.ndarray:
    xmin, ymin, xmax, ymax = world.bounds
    h = int(round((ymax - ymin) / px))
    w = int(round((xmax - xmin) / px))
    xs = xmin + (np.arange(w) + 0.5) * px
    ys = ymax - (np.arange(h) + 0.5) * px
    gx, gy = np.meshgrid(xs, ys)
    img = np.full((h, w), PIXEL_FREE, dtype=np.uint8)
    for o in world.obstacles:
        if isinstance(o, Box):
            inside = (gx >= o.xmin) & (gx <= o.xmax) & (gy >= o.ymin) & (gy <= o.ymax)
        elif isinstance(o, Cylinder):
            inside = np.hypot(gx - o.cx, gy - o.cy) <= o.radius
        else:
            continue
        value = PIXEL_OBSTACLE if overlaps_body(o) else PIXEL_OVERHANG
        img[inside] = np.minimum(img[inside], value)
    for x, y in path_xy:
        img[world_to_pixel(world, x, y, px)] = PIXEL_PATH
    rr = max(int(ROBOT_RADIUS / px / 3), 1)
    for (x, y), value in ((world.start[:2], PIXEL_START), (world.goal, PIXEL_GOAL)):
        r, c = world_to_pixel(world, x, y, px)
        img[max(r - rr, 0):r + rr + 1, max(c - rr, 0):c + rr + 1] = value
    return img


def cmd_render(args) -> int:
    cfg = _run_config_for(args)
    policy = _load_policy(cfg, args.checkpoint)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e.strerror or e}") from e
    scenario = cfg.scenario()
    world = generate_scenario(args.scenario, scenario.max_level, args.seed, scenario)
    env = make_env(cfg, record_trace=True)
    log_ = run_episode(policy, env, world, args.scenario, args.seed, trace=True)
    # costmaps[0] comes from reset; one frame per step after that
    for k, costmap in enumerate(env.costmaps[1:], start=1):
        write_pgm(out / f"costmap_{k:03d}.pgm", costmap_to_image(costmap))
    path_xy = [world.start[:2]] + [(row[1], row[2]) for row in env.trace]
    write_pgm(out / "world.pgm", render_world(world, path_xy))
    write_trace_csv(out / "trace.csv", env.trace)
    print(f"{args.scenario} seed {args.seed}: {log_.outcome.value} after {log_.steps} steps; frames in {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drqn-nav", description="DRQN local navigation from costmaps")
    p.add_argument("--version", action="version",
                   version=f"drqn-nav {__version__} (checkpoint format {FORMAT_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent")
    t.add_argument("--config", type=Path, help="JSON config file")
    t.add_argument("--preset", choices=("paper", "desk"))
    t.add_argument("--seed", type=int)
    t.add_argument("--out", type=Path, help="run directory (default: $DRQN_NAV_OUT/<preset>_seed<seed>)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint file, or 'random' for the uniform baseline")
    e.add_argument("--scenario", choices=(*SCENARIO_KINDS, "all"), default="random")
    e.add_argument("--episodes", type=int, default=200)
    e.add_argument("--seed", type=int, default=0, help="first scenario seed")
    e.add_argument("--csv", type=Path)
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--config", type=Path)
    e.add_argument("--preset", choices=("paper", "desk"))
    e.add_argument("--traces", type=Path, help="also write one trace CSV per episode here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="roll out one episode and dump costmaps")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scenario", choices=SCENARIO_KINDS, default="random")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--config", type=Path)
    r.add_argument("--preset", choices=("paper", "desk"))
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
