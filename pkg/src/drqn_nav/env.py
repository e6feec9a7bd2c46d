"""Navigation POMDP: observations, the 28-action table, shaped reward, episode
lifecycle and the curriculum scheduler."""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .perception import CostmapPerception, costmap_to_image
from .world import (DT, CameraSpec, RobotState, World, check_collision, min_obstacle_distance,
                    render_depth, step_kinematics, wrap_angle)

LINEAR_VELOCITIES = (0.0, 0.2, 0.4, 0.6)
ANGULAR_VELOCITIES = (-0.9, -0.6, -0.3, 0.0, 0.3, 0.6, 0.9)
N_ACTIONS = len(LINEAR_VELOCITIES) * len(ANGULAR_VELOCITIES)
ACTIONS = np.array([(v, w) for v in LINEAR_VELOCITIES for w in ANGULAR_VELOCITIES])

GOAL_RADIUS = 0.3
N_FRAMES = 3
# network input scales for (rho, phi, v, omega)
OBS_SCALE = np.array([6.0, math.pi, 0.6, 0.9])


def action_from_index(i: int) -> tuple:
    """``(v, omega)`` for action ``i``; linear velocity is the major index."""
    if not 0 <= i < N_ACTIONS:
        raise IndexError(f"action index {i} outside 0..{N_ACTIONS - 1}")
    return LINEAR_VELOCITIES[i // 7], ANGULAR_VELOCITIES[i % 7]


def relative_goal(pose, goal) -> tuple:
    """Polar goal ``(rho, phi)`` relative to ``pose = (x, y, theta)``."""
    dx, dy = goal[0] - pose[0], goal[1] - pose[1]
    rho = math.hypot(dx, dy)
    if rho == 0.0:
        return 0.0, 0.0
    return rho, wrap_angle(math.atan2(dy, dx) - pose[2])


class Outcome(str, Enum):
    RUNNING = "RUNNING"
    SUCCESS = "SUCCESS"
    COLLISION = "COLLISION"
    TIMEOUT = "TIMEOUT"


@dataclass(frozen=True)
class EpisodeStatus:
    outcome: Outcome = Outcome.RUNNING
    steps: int = 0

    @property
    def done(self) -> bool:
        return self.outcome is not Outcome.RUNNING


@dataclass(frozen=True)
class RewardBreakdown:
    r_goal: float
    r_collision: float
    r_safety: float
    r_step: float

    @property
    def total(self) -> float:
        return self.r_goal + self.r_collision + self.r_safety + self.r_step


@dataclass(frozen=True)
class RewardConfig:
    goal_reward: float = 500.0
    progress_gain: float = 200.0
    collision_penalty: float = -500.0
    safety_gain: float = -100.0
    step_penalty: float = -5.0


def compute_reward(prev_dist_goal: float, dist_goal: float, prev_min_d: float, min_d: float,
                   event: str = "none", cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """Four-term shaped reward; ``event`` is one of ``none``, ``goal``, ``collision``."""
    if event not in ("none", "goal", "collision"):
        raise ValueError(f"unknown event {event!r}")
    if event == "goal":
        r_goal = cfg.goal_reward
    else:
        r_goal = cfg.progress_gain * (prev_dist_goal - dist_goal)
    r_collision = cfg.collision_penalty if event == "collision" else 0.0
    r_safety = cfg.safety_gain * (prev_min_d - min_d)
    return RewardBreakdown(r_goal, r_collision, r_safety, cfg.step_penalty)


@dataclass(frozen=True)
class Observation:
    """Three costmap images (oldest first), polar goal and current velocity."""

    maps: np.ndarray
    goal: tuple
    vel: tuple

    def __post_init__(self):
        if self.maps.shape[0] != N_FRAMES:
            raise ValueError(f"expected {N_FRAMES} costmap frames")

    def vector(self) -> np.ndarray:
        """Normalised ``[rho, phi, v, omega]``."""
        return np.array([*self.goal, *self.vel]) / OBS_SCALE


TRACE_FIELDS = ("step", "x", "y", "theta", "v", "omega", "action_index",
                "r_goal", "r_collision", "r_safety", "r_step", "total", "outcome")


class NavEnv:
    """Single-robot episode runner over a static :class:`World`.

    Each step moves the robot, renders the depth camera, runs the filter and
    costmap pipeline (with the previous map as scrolled prior) and pushes the
    new image onto the three-frame stack.
    """

    def __init__(self, camera: CameraSpec | None = None, max_steps: int = 200, dt: float = DT,
                 reward: RewardConfig = RewardConfig(), perception: dict | None = None,
                 record_trace: bool = False, noise_seed: int | None = None):
        self.camera = camera or CameraSpec()
        self.max_steps = max_steps
        self.dt = dt
        self.reward_cfg = reward
        self.perception = CostmapPerception(self.camera, **(perception or {}))
        self.record_trace = record_trace
        self._noise_rng = np.random.default_rng(noise_seed) if noise_seed is not None else None
        self.world: World | None = None
        self.status = EpisodeStatus(Outcome.COLLISION)

    def _sense(self):
        cloud = render_depth(self.world, self.state, self.camera, self._noise_rng)
        costmap = self.perception.update(cloud, self.state.pose)
        self.costmaps.append(costmap)
        return costmap_to_image(costmap)

    def _observation(self) -> Observation:
        return Observation(np.stack(self.frames), relative_goal(self.state.pose, self.world.goal),
                           (self.state.v, self.state.omega))

    def reset(self, world: World) -> Observation:
        from .world import ScenarioError

        self.world = world
        self.state = RobotState(*world.start)
        if check_collision(world, self.state):
            raise ScenarioError("start pose is in collision")
        self.perception.reset()
        self.costmaps = []
        self.trace = []
        image = self._sense()
        self.frames = deque([image] * N_FRAMES, maxlen=N_FRAMES)
        self.dist_goal = relative_goal(self.state.pose, world.goal)[0]
        self.min_d = min_obstacle_distance(world, self.state)
        self.status = EpisodeStatus(Outcome.RUNNING, 0)
        return self._observation()

    def step(self, action_index: int):
        if self.status.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        cmd = action_from_index(int(action_index))
        self.state = step_kinematics(self.state, cmd, self.dt)
        dist_goal = relative_goal(self.state.pose, self.world.goal)[0]
        min_d = min_obstacle_distance(self.world, self.state)
        steps = self.status.steps + 1
        if check_collision(self.world, self.state):
            event, outcome = "collision", Outcome.COLLISION
        elif dist_goal < GOAL_RADIUS:
            event, outcome = "goal", Outcome.SUCCESS
        else:
            event = "none"
            outcome = Outcome.TIMEOUT if steps >= self.max_steps else Outcome.RUNNING
        reward = compute_reward(self.dist_goal, dist_goal, self.min_d, min_d, event, self.reward_cfg)
        self.dist_goal, self.min_d = dist_goal, min_d
        self.status = EpisodeStatus(outcome, steps)
        self.frames.append(self._sense())
        if self.record_trace:
            s = self.state
            self.trace.append((steps, s.x, s.y, s.theta, s.v, s.omega, int(action_index), reward.r_goal,
                               reward.r_collision, reward.r_safety, reward.r_step, reward.total, outcome.value))
        return self._observation(), reward, self.status


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


@dataclass(frozen=True)
class CurriculumScheduler:
    """Promotes one level once a full window reaches the success threshold."""

    level: int = 0
    max_level: int = 4
    window_size: int = 100
    promote_threshold: float = 0.8
    window: tuple = field(default=())

    @property
    def success_rate(self) -> float:
        return sum(self.window) / len(self.window) if self.window else 0.0


def curriculum_update(sched: CurriculumScheduler, outcome) -> CurriculumScheduler:
    """Record one episode outcome and return the updated scheduler."""
    if isinstance(outcome, EpisodeStatus):
        outcome = outcome.outcome
    window = (sched.window + (outcome == Outcome.SUCCESS,))[-sched.window_size:]
    if sched.level >= sched.max_level:
        return replace(sched, window=window)
    if len(window) == sched.window_size and sum(window) / len(window) >= sched.promote_threshold:
        return replace(sched, level=sched.level + 1, window=())
    return replace(sched, window=window)
