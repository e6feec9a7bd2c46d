"""Independent brute-force reference implementations used as test oracles."""
import math

import numpy as np

GRID = 60
FREE, OBSTACLE, UNKNOWN = 0, 1, 2


def voxel_oracle(pts, leaf):
    keys = {tuple(math.floor(v / leaf) for v in p) for p in np.asarray(pts, dtype=float)}
    return np.array([[(i + 0.5) * leaf for i in key] for key in sorted(keys)]).reshape(-1, 3)


def sor_oracle(pts, k, std_mul):
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n < 2:
        return pts
    kk = min(k, n - 1)
    means = []
    for i in range(n):
        d = [math.dist(pts[i], pts[j]) for j in range(n) if j != i]
        d.sort()
        means.append(sum(d[:kk]) / kk)
    means = np.array(means)
    mu = means.mean()
    sigma = math.sqrt(((means - mu) ** 2).mean())
    keep = [i for i in range(n) if means[i] <= mu + std_mul * sigma + 1e-12 * max(1.0, abs(mu))]
    return pts[keep]


def costmap_oracle(pts, mask=None, free_height=0.05, res=0.1):
    grid = np.full((GRID, GRID), UNKNOWN, np.uint8)
    for x, y, z in np.asarray(pts, dtype=float).reshape(-1, 3):
        r = 29 - math.floor(x / res)
        c = 29 - math.floor(y / res)
        if not (0 <= r < GRID and 0 <= c < GRID):
            continue
        if mask is not None and mask[r, c]:
            continue
        if z >= free_height:
            grid[r, c] = OBSTACLE
        elif grid[r, c] != OBSTACLE:
            grid[r, c] = FREE
    return grid


def sor_oracle_matrix(pts, k, std_mul):
    """Same rule as :func:`sor_oracle` via a full pairwise distance matrix."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    n = len(pts)
    if n < 2:
        return pts
    kk = min(k, n - 1)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    means = np.sort(d, axis=1)[:, :kk].mean(1)
    mu = means.mean()
    thresh = mu + std_mul * means.std() + 1e-12 * max(1.0, abs(mu))
    return pts[means <= thresh]


def surface_distances(world, pts):
    """Distance from each world point (n, 3) to the nearest rendered surface:
    ground plane, arena walls (up to the wall height) and obstacle solids."""
    from drqn_nav.world import Box

    p = np.asarray(pts, dtype=float).reshape(-1, 3)
    x, y, z = p.T
    best = np.abs(z)
    xmin, ymin, xmax, ymax = world.bounds
    walls = np.minimum.reduce([np.abs(x - xmin), np.abs(x - xmax), np.abs(y - ymin), np.abs(y - ymax)])
    best = np.where((z >= 0) & (z <= world.wall_height), np.minimum(best, walls), best)
    for o in world.obstacles:
        if isinstance(o, Box):
            lo, hi = np.array([o.xmin, o.ymin, o.z_lo]), np.array([o.xmax, o.ymax, o.z_hi])
            q = np.clip(p, lo, hi)
            outside = np.linalg.norm(q - p, axis=1)
            inner = np.minimum((p - lo).min(1), (hi - p).min(1))
            d = np.where(outside > 0, outside, inner)
        else:
            r = np.hypot(x - o.cx, y - o.cy)
            dr = np.maximum(r - o.radius, 0.0)
            dz = np.maximum.reduce([o.z_lo - z, np.zeros_like(z), z - o.z_hi])
            inner = np.minimum.reduce([o.radius - r, z - o.z_lo, o.z_hi - z])
            d = np.where((dr == 0) & (dz == 0), inner, np.hypot(dr, dz))
        best = np.minimum(best, d)
    return best
