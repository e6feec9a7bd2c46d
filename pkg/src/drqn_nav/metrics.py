"""Evaluation protocol: batched greedy rollouts over scenario families, the
SR / ER / RT / AAVC metrics, ablation presets and the CSV report."""
from __future__ import annotations

import copy
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .env import N_ACTIONS, NavEnv, Outcome, action_from_index
from .world import DT, ScenarioConfig, generate_scenario

SCENARIO_KINDS = ("random", "office", "coffee")
REPORT_FIELDS = ("scenario", "episodes", "sr", "er", "rt", "aavc")


@dataclass(frozen=True)
class EpisodeLog:
    outcome: Outcome
    steps: int
    rewards: tuple
    commands: tuple
    kind: str = "random"
    seed: int = 0

    def __post_init__(self):
        if len(self.commands) != self.steps or len(self.rewards) != self.steps:
            raise ValueError("one reward and one command per step expected")

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))


@dataclass(frozen=True)
class MetricsReport:
    sr: float
    er: float
    rt: float | None
    aavc: float
    episodes: int


class RandomPolicy:
    """Uniform random actions (the generalisation baseline)."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self):
        pass

    def __call__(self, obs) -> int:
        return int(self.rng.integers(N_ACTIONS))


class ConstantPolicy:
    def __init__(self, action: int = 0):
        self.action = action

    def reset(self):
        pass

    def __call__(self, obs) -> int:
        return self.action


def run_episode(policy, env: NavEnv, world, kind: str = "random", seed: int = 0, trace: bool = False):
    policy.reset()
    env.record_trace = trace
    obs = env.reset(world)
    rewards, commands = [], []
    status = env.status
    while not status.done:
        a = policy(obs)
        obs, r, status = env.step(a)
        rewards.append(r.total)
        commands.append(action_from_index(a))
    return EpisodeLog(status.outcome, status.steps, tuple(rewards), tuple(commands), kind, seed)


def _run_chunk(args):
    policy, env, kind, seeds, level, scenario, per_seed_policy = args
    logs = []
    for s in seeds:
        pol = per_seed_policy(s) if per_seed_policy is not None else policy
        world = generate_scenario(kind, level, s, scenario)
        logs.append(run_episode(pol, env, world, kind, s))
    return logs


def run_episodes(policy, kind: str, n: int, base_seed: int = 0, *, level: int | None = None,
                 scenario: ScenarioConfig = ScenarioConfig(), env: NavEnv | None = None, jobs: int = 1,
                 per_seed_policy=None) -> list:
    """Roll out ``n`` episodes on scenarios seeded ``base_seed .. base_seed + n - 1``.

    ``policy`` is a callable ``obs -> action index`` with ``reset()``, called
    between episodes. ``per_seed_policy(seed)`` optionally builds a fresh
    policy per episode (used for the random baseline so results do not depend
    on episode order). With ``jobs > 1`` episodes run in worker processes and
    are merged in seed order.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if kind not in SCENARIO_KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    level = scenario.max_level if level is None else level
    env = env if env is not None else NavEnv()
    seeds = list(range(base_seed, base_seed + n))
    if jobs <= 1:
        return _run_chunk((policy, env, kind, seeds, level, scenario, per_seed_policy))
    # one episode per task keeps results independent of the job count
    tasks = [(copy.deepcopy(policy), env, kind, [s], level, scenario, per_seed_policy) for s in seeds]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        chunks = list(ex.map(_run_chunk, tasks))
    logs = [log for c in chunks for log in c]
    return sorted(logs, key=lambda lg: lg.seed)


def compute_metrics(logs, dt: float = DT) -> MetricsReport:
    """SR, ER (over all episodes), RT (successes only, seconds) and AAVC
    (per-episode mean of |omega_t - omega_{t-1}|, then averaged)."""
    logs = list(logs)
    if not logs:
        raise ValueError("compute_metrics needs at least one episode")
    n = len(logs)
    successes = [lg for lg in logs if lg.outcome == Outcome.SUCCESS]
    sr = len(successes) / n
    er = math.fsum(lg.total_reward for lg in logs) / n
    rt = math.fsum(lg.steps * dt for lg in successes) / len(successes) if successes else None
    per_episode = []
    for lg in logs:
        w = np.array([c[1] for c in lg.commands], dtype=float)
        per_episode.append(float(np.mean(np.abs(np.diff(w)))) if len(w) > 1 else 0.0)
    aavc = math.fsum(per_episode) / n
    return MetricsReport(sr, er, rt, aavc, n)


ABLATIONS = {
    "full": {},
    "no_lstm": dict(recurrent=False, frames=1, unroll=1),
    "no_curriculum": dict(curriculum=False),
}


def ablation_config(name: str, preset: str = "paper"):
    """``(TrainerConfig, ArchConfig)`` for ``full``, ``no_lstm`` or ``no_curriculum``."""
    from .config import preset_config

    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; expected one of {', '.join(ABLATIONS)}")
    cfg = replace(preset_config(preset), **ABLATIONS[name])
    return cfg.trainer(), cfg.arch()


def _cell(v) -> str:
    return "NA" if v is None else f"{v:.4f}"


def emit_report(reports: dict, path) -> None:
    """Write ``{scenario kind: MetricsReport}`` as CSV."""
    lines = [",".join(REPORT_FIELDS)]
    for kind, r in reports.items():
        lines.append(",".join([kind, str(r.episodes), _cell(r.sr), _cell(r.er), _cell(r.rt), _cell(r.aavc)]))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise OSError(f"cannot write report {path}: {e.strerror or e}") from e


def parse_report(path) -> dict:
    out = {}
    rows = Path(path).read_text().splitlines()
    if not rows or tuple(rows[0].split(",")) != REPORT_FIELDS:
        raise ValueError(f"{path}: not a metrics report")
    for line in rows[1:]:
        kind, eps, sr, er, rt, aavc = line.split(",")
        out[kind] = MetricsReport(float(sr), float(er), None if rt == "NA" else float(rt), float(aavc), int(eps))
    return out


def format_report(reports: dict) -> str:
    lines = [f"{'scenario':<10}{'episodes':>9}{'SR':>8}{'ER':>10}{'RT':>8}{'AAVC':>8}"]
    for kind, r in reports.items():
        rt = "NA" if r.rt is None else f"{r.rt:.2f}"
        lines.append(f"{kind:<10}{r.episodes:>9}{r.sr:>8.3f}{r.er:>10.1f}{rt:>8}{r.aavc:>8.3f}")
    return "\n".join(lines)
