"""Ground-truth world: scenarios, unicycle kinematics, collision queries and a
raycast depth camera.

Coordinates are metric. The world frame has z up; the robot frame has its
origin on the ground below the robot centre, x forward and y to the left.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np

ROBOT_RADIUS = 0.3
ROBOT_HEIGHT = 1.35
DT = 0.1
DISTANCE_CAP = 10.0


class ScenarioError(RuntimeError):
    """Raised when a scenario cannot be generated."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Box:
    """Axis-aligned box footprint with a vertical extent."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float
    z_lo: float = 0.0
    z_hi: float = 1.0

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError(f"degenerate box footprint: {self}")
        _check_heights(self.z_lo, self.z_hi)

    def footprint_distance(self, x: float, y: float) -> float:
        dx = max(self.xmin - x, 0.0, x - self.xmax)
        dy = max(self.ymin - y, 0.0, y - self.ymax)
        return math.hypot(dx, dy)

    def inside(self, xmin, ymin, xmax, ymax) -> bool:
        return xmin <= self.xmin and self.xmax <= xmax and ymin <= self.ymin and self.ymax <= ymax


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder (disc footprint) with a vertical extent."""

    cx: float
    cy: float
    radius: float
    z_lo: float = 0.0
    z_hi: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"non-positive cylinder radius: {self}")
        _check_heights(self.z_lo, self.z_hi)

    def footprint_distance(self, x: float, y: float) -> float:
        return max(math.hypot(x - self.cx, y - self.cy) - self.radius, 0.0)

    def inside(self, xmin, ymin, xmax, ymax) -> bool:
        r = self.radius
        return xmin <= self.cx - r and self.cx + r <= xmax and ymin <= self.cy - r and self.cy + r <= ymax


Obstacle = Union[Box, Cylinder]


def _check_heights(z_lo, z_hi):
    if not (0.0 <= z_lo < z_hi <= 2.0):
        raise ValueError(f"invalid height range [{z_lo}, {z_hi}]")


def overlaps_body(obs: Obstacle, body_height: float = ROBOT_HEIGHT) -> bool:
    return obs.z_lo <= body_height and obs.z_hi >= 0.0


@dataclass(frozen=True)
class World:
    """Static scene. ``bounds`` is (xmin, ymin, xmax, ymax); the arena is walled
    by vertical planes of ``wall_height`` that the camera can see (0 disables)."""

    bounds: tuple
    obstacles: tuple = ()
    goal: tuple = (0.0, 0.0)
    start: tuple = (0.0, 0.0, 0.0)
    wall_height: float = 1.0
    kind: str = "random"

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        for p in (self.goal, self.start):
            if not (xmin <= p[0] <= xmax and ymin <= p[1] <= ymax):
                raise ValueError(f"point {p} outside bounds {self.bounds}")
        for o in self.obstacles:
            if not o.inside(xmin, ymin, xmax, ymax):
                raise ValueError(f"obstacle {o} not inside bounds {self.bounds}")


@dataclass(frozen=True)
class RobotState:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v: float = 0.0
    omega: float = 0.0
    radius: float = ROBOT_RADIUS

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("robot radius must be positive")
        if self.v < 0:
            raise ValueError("reverse motion is not allowed")

    @property
    def pose(self):
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class CameraSpec:
    h_fov: float = math.radians(57.0)
    v_fov: float = math.radians(43.0)
    range_min: float = 0.8
    range_max: float = 4.0
    n_h: int = 64
    n_v: int = 48
    mount_height: float = 0.6
    noise_std: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.h_fov < math.pi and 0.0 < self.v_fov < math.pi):
            raise ValueError("field of view must lie in (0, pi)")
        if not self.range_min < self.range_max:
            raise ValueError("range_min must be below range_max")
        if self.n_h < 2 or self.n_v < 2:
            raise ValueError("need at least a 2x2 ray grid")

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the camera-yaw frame, shape (n_v * n_h, 3)."""
        az = np.linspace(-self.h_fov / 2, self.h_fov / 2, self.n_h)
        el = np.linspace(-self.v_fov / 2, self.v_fov / 2, self.n_v)
        ee, aa = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1)
        return d.reshape(-1, 3)


# ---------------------------------------------------------------------------
# Scenario generation


@dataclass(frozen=True)
class ScenarioConfig:
    """Arena size and curriculum level tables for random scenarios."""

    arena: float = 8.0
    obstacle_counts: tuple = (0, 2, 4, 6, 8)
    goal_distances: tuple = (2.0, 3.0, 4.0, 5.0, 6.0)
    min_goal_distance: float = 1.0
    obstacle_size: tuple = (0.2, 0.6)
    overhang_prob: float = 0.25
    path_fraction: float = 0.5
    wall_height: float = 1.0
    clearance: float = 0.15
    max_tries: int = 500

    @property
    def max_level(self) -> int:
        return len(self.obstacle_counts) - 1


def generate_scenario(kind: str, level: int = 0, seed: int = 0,
                      config: ScenarioConfig | None = None) -> World:
    """Build a deterministic world for ``(kind, level, seed)``."""
    cfg = config or ScenarioConfig()
    rng = np.random.default_rng(seed)
    if kind == "random":
        if not 0 <= level <= cfg.max_level:
            raise ValueError(f"level {level} outside 0..{cfg.max_level}")
        return _random_world(cfg, level, rng)
    if kind == "office":
        return _office_world(cfg, rng)
    if kind == "coffee":
        return _coffee_world(cfg, rng)
    raise ValueError(f"unknown scenario kind {kind!r}")


def _bounds(cfg):
    h = cfg.arena / 2
    return (-h, -h, h, h)


def _random_obstacle(rng, bounds, cfg, near=None) -> Obstacle:
    """Random box or cylinder; ``near`` pins its centre (clipped to the arena)."""
    size = rng.uniform(*cfg.obstacle_size)
    if rng.random() < cfg.overhang_prob:
        z_lo, z_hi = float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.8, 1.2))
    else:
        z_lo, z_hi = 0.0, float(rng.uniform(0.3, 1.2))
    if rng.random() < 0.5:
        w, d = size, rng.uniform(*cfg.obstacle_size)
        hx, hy = w / 2, d / 2
    else:
        hx = hy = size / 2
    if near is None:
        cx = rng.uniform(bounds[0] + hx, bounds[2] - hx)
        cy = rng.uniform(bounds[1] + hy, bounds[3] - hy)
    else:
        cx = float(np.clip(near[0], bounds[0] + hx, bounds[2] - hx))
        cy = float(np.clip(near[1], bounds[1] + hy, bounds[3] - hy))
    if hx != hy:
        return Box(cx - hx, cy - hy, cx + hx, cy + hy, z_lo, z_hi)
    return Cylinder(cx, cy, hx, z_lo, z_hi)


def _free(bounds, obstacles, x, y, margin) -> bool:
    xmin, ymin, xmax, ymax = bounds
    if not (xmin + margin <= x <= xmax - margin and ymin + margin <= y <= ymax - margin):
        return False
    return all(o.footprint_distance(x, y) > margin for o in obstacles if overlaps_body(o))


def _place_start_goal(rng, bounds, obstacles, d_min, d_max, cfg):
    margin = ROBOT_RADIUS + cfg.clearance
    xmin, ymin, xmax, ymax = bounds
    for _ in range(cfg.max_tries):
        sx = rng.uniform(xmin + margin, xmax - margin)
        sy = rng.uniform(ymin + margin, ymax - margin)
        if not _free(bounds, obstacles, sx, sy, margin):
            continue
        d = rng.uniform(d_min, d_max)
        a = rng.uniform(-math.pi, math.pi)
        gx, gy = sx + d * math.cos(a), sy + d * math.sin(a)
        if not _free(bounds, obstacles, gx, gy, margin):
            continue
        heading = wrap_angle(float(rng.uniform(-math.pi, math.pi)))
        return (float(sx), float(sy), heading), (float(gx), float(gy))
    raise ScenarioError("could not place a collision-free start and goal")


def _random_world(cfg, level, rng) -> World:
    bounds = _bounds(cfg)
    d_max = cfg.goal_distances[level]
    d_min = min(cfg.min_goal_distance, d_max)
    n = cfg.obstacle_counts[level]
    margin = ROBOT_RADIUS + cfg.clearance
    for _ in range(cfg.max_tries):
        start, goal = _place_start_goal(rng, bounds, (), d_min, d_max, cfg)
        obstacles: list = []
        tries = 0
        while len(obstacles) < n and tries < cfg.max_tries:
            tries += 1
            near = None
            if rng.random() < cfg.path_fraction:
                # bias towards the straight start-goal segment so avoidance matters
                u = rng.uniform(0.25, 0.75)
                near = (start[0] + u * (goal[0] - start[0]) + rng.normal(0, 0.4),
                        start[1] + u * (goal[1] - start[1]) + rng.normal(0, 0.4))
            o = _random_obstacle(rng, bounds, cfg, near)
            if o.footprint_distance(*start[:2]) <= margin or o.footprint_distance(*goal) <= margin:
                continue
            obstacles.append(o)
        if len(obstacles) == n:
            return World(bounds, tuple(obstacles), goal, start, cfg.wall_height, "random")
    raise ScenarioError(f"could not place {n} obstacles")


def _office_world(cfg, rng) -> World:
    """Two 1.6 x 0.8 m desks either side of a 0.9 m passage on the start-goal line."""
    bounds = _bounds(cfg)
    gap, dl, dw = 0.9, 1.6, 0.8
    cy = float(rng.uniform(-0.2, 0.2))
    obstacles: list = []
    for sign in (-1, 1):
        y_in = cy + sign * gap / 2
        y_out = y_in + sign * dw
        ylo, yhi = min(y_in, y_out), max(y_in, y_out)
        obstacles.append(Box(-dl / 2, ylo, dl / 2, yhi, 0.7, 0.75))
        for lx in (-dl / 2 + 0.04, dl / 2 - 0.04):
            for ly in (ylo + 0.04, yhi - 0.04):
                obstacles.append(Cylinder(lx, ly, 0.03, 0.0, 0.7))
    run = min(cfg.arena / 2 - ROBOT_RADIUS - cfg.clearance, 1.8)
    start = (-run, cy + float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-0.3, 0.3)))
    goal = (run, cy + float(rng.uniform(-0.1, 0.1)))
    return World(bounds, tuple(obstacles), goal, start, cfg.wall_height, "office")


COFFEE_FOOT_RADIUS = 0.08
COFFEE_TOP_RADIUS = 0.4
COFFEE_TOP_Z = (0.5, 0.8)


def _coffee_world(cfg, rng) -> World:
    """One-footed round tables (thin foot under a wide top) between start and goal."""
    bounds = _bounds(cfg)
    margin = ROBOT_RADIUS + cfg.clearance
    h = cfg.arena / 2
    run = min(h - margin, 1.8)
    for _ in range(cfg.max_tries):
        start = (-run, float(rng.uniform(-0.8, 0.8)), float(rng.uniform(-0.5, 0.5)))
        goal = (run, float(rng.uniform(-0.8, 0.8)))
        tables: list = []
        tries = 0
        while len(tables) < 3 and tries < cfg.max_tries:
            tries += 1
            cx = float(rng.uniform(-run + 0.9, run - 0.9))
            cy = float(rng.uniform(-h + COFFEE_TOP_RADIUS, h - COFFEE_TOP_RADIUS))
            if any(math.hypot(cx - t[0], cy - t[1]) < 2 * COFFEE_TOP_RADIUS + 2 * ROBOT_RADIUS + 0.1 for t in tables):
                continue
            tables.append((cx, cy))
        if len(tables) < 3:
            continue
        obstacles = []
        for cx, cy in tables:
            obstacles.append(Cylinder(cx, cy, COFFEE_FOOT_RADIUS, 0.0, COFFEE_TOP_Z[0]))
            obstacles.append(Cylinder(cx, cy, COFFEE_TOP_RADIUS, *COFFEE_TOP_Z))
        if _free(bounds, obstacles, *start[:2], margin) and _free(bounds, obstacles, *goal, margin):
            return World(bounds, tuple(obstacles), goal, start, cfg.wall_height, "coffee")
    raise ScenarioError("could not place coffee tables")


# ---------------------------------------------------------------------------
# Kinematics and geometric queries


def step_kinematics(state: RobotState, cmd: Sequence[float], dt: float = DT) -> RobotState:
    """Explicit-Euler unicycle step; the command becomes the current velocity."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v, w = float(cmd[0]), float(cmd[1])
    return replace(
        state,
        x=state.x + v * math.cos(state.theta) * dt,
        y=state.y + v * math.sin(state.theta) * dt,
        theta=wrap_angle(state.theta + w * dt),
        v=v,
        omega=w,
    )


def check_collision(world: World, state: RobotState) -> bool:
    xmin, ymin, xmax, ymax = world.bounds
    r = state.radius
    if state.x - r < xmin or state.x + r > xmax or state.y - r < ymin or state.y + r > ymax:
        return True
    return any(o.footprint_distance(state.x, state.y) <= r for o in world.obstacles if overlaps_body(o))


def min_obstacle_distance(world: World, state: RobotState, cap: float = DISTANCE_CAP) -> float:
    """Clearance between the robot disc and the nearest body-height obstacle."""
    best = cap
    for o in world.obstacles:
        if overlaps_body(o):
            best = min(best, o.footprint_distance(state.x, state.y) - state.radius)
    return max(best, 0.0)


# ---------------------------------------------------------------------------
# Depth camera


def _ray_box(o, p, d, t_best):
    inv = np.divide(1.0, d, out=np.full_like(d, np.inf), where=d != 0)
    lo = np.array([o.xmin, o.ymin, o.z_lo])
    hi = np.array([o.xmax, o.ymax, o.z_hi])
    with np.errstate(invalid="ignore"):
        t1 = (lo - p) * inv
        t2 = (hi - p) * inv
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = d == 0
    inside = (p >= lo) & (p <= hi)
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tn = np.minimum(t1, t2).max(axis=1)
    tf = np.maximum(t1, t2).min(axis=1)
    hit = (tn <= tf) & (tn > 0)
    return np.where(hit & (tn < t_best), tn, t_best)


def _ray_cylinder(o, p, d, t_best):
    ox, oy = p[0] - o.cx, p[1] - o.cy
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - o.radius ** 2
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = np.where(ok, (-b - sq) / (2 * a), np.inf)
    z = p[2] + t_side * dz
    side = ok & (t_side > 0) & (z >= o.z_lo) & (z <= o.z_hi)
    t = np.where(side, t_side, np.inf)
    for zc in (o.z_lo, o.z_hi):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = np.where(dz != 0, (zc - p[2]) / dz, np.inf)
        hx, hy = ox + tc * dx, oy + tc * dy
        cap = (tc > 0) & (hx * hx + hy * hy <= o.radius ** 2)
        t = np.where(cap & (tc < t), tc, t)
    return np.minimum(t, t_best)


def _ray_walls(world, p, d, t_best):
    if world.wall_height <= 0:
        return t_best
    xmin, ymin, xmax, ymax = world.bounds
    t = np.full(len(d), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for axis, lo, hi in ((0, xmin, xmax), (1, ymin, ymax)):
            comp = d[:, axis]
            tp = np.where(comp > 0, (hi - p[axis]) / comp, np.where(comp < 0, (lo - p[axis]) / comp, np.inf))
            t = np.minimum(t, tp)
    z = p[2] + t * d[:, 2]
    hit = np.isfinite(t) & (z >= 0) & (z <= world.wall_height)
    return np.where(hit & (t < t_best), t, t_best)


def _bounding_circle(o):
    if isinstance(o, Box):
        return (o.xmin + o.xmax) / 2, (o.ymin + o.ymax) / 2, math.hypot(o.xmax - o.xmin, o.ymax - o.ymin) / 2
    return o.cx, o.cy, o.radius


def raycast(world: World, state: RobotState, cam: CameraSpec, rng=None):
    """Return (ranges, world-frame directions, camera origin) for every ray.

    Rays with no hit carry ``inf``. Obstacles that cannot produce an in-range
    hit are culled, and the rest are only tested against the ray columns their
    bounding circle spans.
    """
    c, s = math.cos(state.theta), math.sin(state.theta)
    local = cam.ray_directions()
    d = np.empty_like(local)
    d[:, 0] = c * local[:, 0] - s * local[:, 1]
    d[:, 1] = s * local[:, 0] + c * local[:, 1]
    d[:, 2] = local[:, 2]
    p = np.array([state.x, state.y, cam.mount_height])
    with np.errstate(divide="ignore"):
        t = np.where(d[:, 2] < 0, -p[2] / d[:, 2], np.inf)
    az = np.linspace(-cam.h_fov / 2, cam.h_fov / 2, cam.n_h)
    cols = np.arange(cam.n_h)
    grid_idx = np.arange(cam.n_v * cam.n_h).reshape(cam.n_v, cam.n_h)
    spacing = cam.h_fov / (cam.n_h - 1)
    for o in world.obstacles:
        bx, by, br = _bounding_circle(o)
        dc = math.hypot(bx - p[0], by - p[1])
        if dc - br > cam.range_max:
            continue
        if dc > br:
            bearing = wrap_angle(math.atan2(by - p[1], bx - p[0]) - state.theta)
            half = math.asin(br / dc) + spacing
            sel = cols[np.abs(az - bearing) <= half]
            if len(sel) == 0:
                continue
            idx = grid_idx[:, sel].ravel()
        else:
            idx = grid_idx.ravel()
        ts = t[idx]
        ds = d[idx]
        t[idx] = _ray_box(o, p, ds, ts) if isinstance(o, Box) else _ray_cylinder(o, p, ds, ts)
    t = _ray_walls(world, p, d, t)
    if cam.noise_std > 0 and rng is not None:
        t = t + rng.normal(0.0, cam.noise_std, size=t.shape)
    return t, d, p


def render_depth(world: World, state: RobotState, cam: CameraSpec | None = None, rng=None) -> np.ndarray:
    """Point cloud (N, 3) in the robot frame from the simulated depth camera."""
    cam = cam or CameraSpec()
    t, d, p = raycast(world, state, cam, rng)
    keep = np.isfinite(t) & (t >= cam.range_min) & (t <= cam.range_max)
    pts = p + t[keep, None] * d[keep]
    return world_to_robot(pts, state)


def world_to_robot(points: np.ndarray, state: RobotState) -> np.ndarray:
    c, s = math.cos(state.theta), math.sin(state.theta)
    dx = points[:, 0] - state.x
    dy = points[:, 1] - state.y
    out = np.empty_like(points)
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = points[:, 2]
    return out


def robot_to_world(points: np.ndarray, state: RobotState) -> np.ndarray:
    c, s = math.cos(state.theta), math.sin(state.theta)
    out = np.empty_like(points)
    out[:, 0] = state.x + c * points[:, 0] - s * points[:, 1]
    out[:, 1] = state.y + s * points[:, 0] + c * points[:, 1]
    out[:, 2] = points[:, 2]
    return out
