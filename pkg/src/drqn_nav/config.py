"""Flat run configuration with ``paper`` and ``desk`` presets.

A config file is a JSON object over the keys of :class:`RunConfig`; unknown
keys are rejected. Precedence is command-line flags > file > preset defaults.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .agent import TrainerConfig
from .neural.network import ArchConfig
from .world import CameraSpec, ScenarioConfig

OUT_ROOT_ENV = "DRQN_NAV_OUT"
PRESETS = ("paper", "desk")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str = "paper"
    seed: int = 0
    out_dir: str | None = None
    # scenario and curriculum table
    arena: float = 8.0
    obstacle_counts: tuple = (0, 2, 4, 6, 8)
    goal_distances: tuple = (2.0, 3.0, 4.0, 5.0, 6.0)
    min_goal_distance: float = 1.0
    obstacle_size: tuple = (0.2, 0.6)
    overhang_prob: float = 0.25
    path_fraction: float = 0.5
    wall_height: float = 1.0
    # camera
    h_fov_deg: float = 57.0
    v_fov_deg: float = 43.0
    range_min: float = 0.8
    range_max: float = 4.0
    camera_rays_h: int = 64
    camera_rays_v: int = 48
    camera_height: float = 0.6
    depth_noise: float = 0.0
    # perception
    voxel_leaf: float = 0.05
    sor_k: int = 50
    sor_std_mul: float = 1.0
    max_height: float = 1.35
    free_height: float = 0.05
    # network
    conv_channels: tuple = (32, 64, 64)
    proj: int = 64
    hidden: int = 256
    fc: int = 256
    recurrent: bool = True
    frames: int = 3
    q_scale: float = 100.0
    # trainer
    lr: float = 1e-3
    gamma: float = 0.97
    batch_size: int = 1024
    unroll: int = 3
    eps_init: float = 1.0
    eps_final: float = 0.1
    eps_horizon: int = 100_000
    target_sync: int = 2000
    episode_length: int = 200
    buffer_size: int = 200_000
    warmup: int = 5000
    train_every: int = 1
    total_steps: int = 1_000_000
    curriculum: bool = True
    curriculum_window: int = 100
    promote_threshold: float = 0.8
    eval_every: int = 10_000
    eval_episodes: int = 50
    checkpoint_every: int = 50_000

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {', '.join(PRESETS)}")
        for name in ("obstacle_counts", "goal_distances", "obstacle_size", "conv_channels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.obstacle_counts) != len(self.goal_distances):
            raise ConfigError("obstacle_counts and goal_distances must have one entry per level")
        if len(self.conv_channels) != 3:
            raise ConfigError("conv_channels needs three entries")

    # -- component configs ---------------------------------------------------
    def scenario(self) -> ScenarioConfig:
        return ScenarioConfig(arena=self.arena, obstacle_counts=self.obstacle_counts,
                              goal_distances=self.goal_distances, min_goal_distance=self.min_goal_distance,
                              obstacle_size=self.obstacle_size, overhang_prob=self.overhang_prob,
                              path_fraction=self.path_fraction, wall_height=self.wall_height)

    def camera(self) -> CameraSpec:
        return CameraSpec(math.radians(self.h_fov_deg), math.radians(self.v_fov_deg), self.range_min,
                          self.range_max, self.camera_rays_h, self.camera_rays_v, self.camera_height,
                          self.depth_noise)

    def perception(self) -> dict:
        return dict(leaf=self.voxel_leaf, k=self.sor_k, std_mul=self.sor_std_mul, max_h=self.max_height,
                    free_height=self.free_height)

    def arch(self) -> ArchConfig:
        return ArchConfig(frames=self.frames, channels=self.conv_channels, proj=self.proj, hidden=self.hidden,
                          fc=self.fc, recurrent=self.recurrent, q_scale=self.q_scale)

    def trainer(self) -> TrainerConfig:
        names = {f.name for f in fields(TrainerConfig)}
        return TrainerConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


DESK_OVERRIDES = dict(
    preset="desk",
    arena=4.0,
    obstacle_counts=(0, 1, 2, 3),
    goal_distances=(1.5, 2.0, 2.5, 3.0),
    min_goal_distance=1.0,
    camera_rays_h=48,
    camera_rays_v=36,
    conv_channels=(8, 16, 16),
    proj=64,
    hidden=32,
    fc=32,
    batch_size=64,
    lr=1e-4,
    eps_horizon=20_000,
    target_sync=1000,
    warmup=1000,
    total_steps=50_000,
    curriculum_window=50,
    eval_every=5000,
    eval_episodes=100,
    checkpoint_every=10_000,
)


def preset_config(name: str = "paper") -> RunConfig:
    if name == "paper":
        return RunConfig()
    if name == "desk":
        return RunConfig(**DESK_OVERRIDES)
    raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} expects true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"config key {key!r} expects an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {key!r} expects a list")
        return tuple(value)
    return value


def merge(base: RunConfig, values: dict) -> RunConfig:
    """Apply ``values`` over ``base``; unknown keys raise :class:`ConfigError`."""
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    if "preset" in values and values["preset"] != base.preset:
        base = preset_config(values["preset"])
    defaults = asdict(base)
    coerced = {k: _coerce(k, v, defaults[k]) for k, v in values.items() if v is not None}
    return replace(base, **coerced)


def load_config_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {p}: {e.strerror or e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e.msg} at line {e.lineno})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: expected a JSON object")
    return data


def resolve_config(preset: str | None = None, path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults of ``preset`` < config file < ``overrides`` (flags)."""
    file_values = load_config_file(path) if path is not None else {}
    name = preset or file_values.get("preset") or "paper"
    cfg = preset_config(name)
    cfg = merge(cfg, {k: v for k, v in file_values.items() if k != "preset"})
    cfg = merge(cfg, dict(overrides or {}))
    return cfg


def output_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))
