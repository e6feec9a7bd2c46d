"""Point-cloud filtering and bird's-eye costmap projection.

The filters are plain functions with thin scikit-learn transformer wrappers so
the chain ``downsample -> outlier removal -> height clip`` can be expressed as
a :class:`sklearn.pipeline.Pipeline`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.pipeline import Pipeline

FREE, OBSTACLE, UNKNOWN = 0, 1, 2
PIXEL_CODES = np.array([255, 0, 127], dtype=np.uint8)  # indexed by state

GRID = 60
RESOLUTION = 0.1
FREE_HEIGHT = 0.05
MAX_HEIGHT = 1.35


def check_cloud(cloud) -> np.ndarray:
    """Validate and return a float (N, 3) array."""
    pts = np.asarray(cloud, dtype=float)
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point cloud, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


def voxel_downsample(cloud, leaf: float = 0.05) -> np.ndarray:
    """One point per occupied voxel (its centre), in ascending voxel order.

    Voxels are anchored at the origin: index ``floor(p / leaf)``.
    """
    if leaf <= 0:
        raise ValueError("leaf size must be positive")
    pts = check_cloud(cloud)
    if len(pts) == 0:
        return pts
    idx = np.floor(pts / leaf).astype(np.int64)
    lo = idx.min(axis=0)
    span = idx.max(axis=0) - lo + 1
    if np.prod(span.astype(float)) < 2.0 ** 62:
        # pack into one lexicographically ordered key; much faster than unique(axis=0)
        rel = idx - lo
        key = (rel[:, 0] * span[1] + rel[:, 1]) * span[2] + rel[:, 2]
        key = np.unique(key)
        rel = np.stack([key // (span[1] * span[2]), (key // span[2]) % span[1], key % span[2]], axis=1)
        idx = rel + lo
    else:
        idx = np.unique(idx, axis=0)
    return (idx + 0.5) * leaf


def knn_mean_distances(pts: np.ndarray, k: int) -> np.ndarray:
    """Mean distance of every point to its ``k`` nearest neighbours (itself excluded)."""
    n = len(pts)
    kk = min(k, n - 1)
    dist, _ = cKDTree(pts).query(pts, k=kk + 1)
    dist = dist.reshape(n, kk + 1)
    # the self-match sorts first at distance 0; duplicates may swap it but not the sum
    return dist[:, 1:].sum(axis=1) / kk


def remove_statistical_outliers(cloud, k: int = 50, std_mul: float = 1.0) -> np.ndarray:
    """Drop points whose mean k-NN distance exceeds ``mean + std_mul * std``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    pts = check_cloud(cloud)
    if len(pts) < 2:
        return pts
    d = knn_mean_distances(pts, k)
    return pts[d <= d.mean() + std_mul * d.std()]


def height_filter(cloud, max_h: float = MAX_HEIGHT) -> np.ndarray:
    pts = check_cloud(cloud)
    return pts[pts[:, 2] <= max_h]


class _StatelessFilter(TransformerMixin, BaseEstimator):
    """Filters carry no fitted state; ``fit`` is a no-op."""

    def fit(self, X, y=None):
        return self

    def __sklearn_is_fitted__(self):
        return True


class VoxelDownsampler(_StatelessFilter):
    def __init__(self, leaf=0.05):
        self.leaf = leaf

    def transform(self, X):
        return voxel_downsample(X, self.leaf)


class StatisticalOutlierRemover(_StatelessFilter):
    def __init__(self, k=50, std_mul=1.0):
        self.k = k
        self.std_mul = std_mul

    def transform(self, X):
        return remove_statistical_outliers(X, self.k, self.std_mul)


class HeightFilter(_StatelessFilter):
    def __init__(self, max_h=MAX_HEIGHT):
        self.max_h = max_h

    def transform(self, X):
        return height_filter(X, self.max_h)


def make_filter_pipeline(leaf=0.05, k=50, std_mul=1.0, max_h=MAX_HEIGHT) -> Pipeline:
    """The fixed-order filter chain as a scikit-learn pipeline."""
    return Pipeline([
        ("downsample", VoxelDownsampler(leaf)),
        ("outliers", StatisticalOutlierRemover(k, std_mul)),
        ("height", HeightFilter(max_h)),
    ])


# ---------------------------------------------------------------------------
# Costmap


@dataclass(frozen=True)
class Costmap:
    """Robot-centred tri-state grid.

    Row 0 is the farthest-forward row and column 0 the leftmost. Cell
    ``(r, c)`` covers robot-frame ``x`` in ``[(29 - r) * res, (30 - r) * res)``
    and ``y`` in ``[(29 - c) * res, (30 - c) * res)``. ``pose`` is the world
    pose the grid was built at, used to scroll it into the next frame.
    """

    grid: np.ndarray
    pose: tuple = (0.0, 0.0, 0.0)
    resolution: float = RESOLUTION

    def __post_init__(self):
        if self.grid.shape != (GRID, GRID):
            raise ValueError(f"costmap grid must be {GRID}x{GRID}")

    @classmethod
    def unknown(cls, pose=(0.0, 0.0, 0.0)) -> "Costmap":
        return cls(np.full((GRID, GRID), UNKNOWN, dtype=np.uint8), tuple(pose))


def cell_of(x, y, res: float = RESOLUTION):
    """Grid (row, col) of robot-frame coordinates; may fall outside the grid."""
    half = GRID // 2
    row = half - 1 - np.floor(np.asarray(x) / res).astype(np.int64)
    col = half - 1 - np.floor(np.asarray(y) / res).astype(np.int64)
    return row, col


def cell_centers(res: float = RESOLUTION):
    """Robot-frame (x, y) of every cell centre, each of shape (GRID, GRID)."""
    half = GRID // 2
    k = half - 1 - np.arange(GRID)
    x = (k + 0.5) * res
    return np.meshgrid(x, x, indexing="ij")


def blind_wedge_mask(h_fov: float = math.radians(57.0), range_min: float = 0.8,
                     res: float = RESOLUTION) -> np.ndarray:
    """Cells in front of the robot closer than the camera's minimum range."""
    x, y = cell_centers(res)
    return (np.hypot(x, y) < range_min) & (x > 0) & (np.abs(np.arctan2(y, x)) <= h_fov / 2)


def scroll_costmap(prior: Costmap, pose) -> np.ndarray:
    """Resample ``prior`` into the frame of ``pose`` (nearest cell); cells that
    were outside the prior's extent become UNKNOWN."""
    x0, y0, t0 = prior.pose
    x1, y1, t1 = pose
    if (x0, y0, t0) == tuple(pose):
        return prior.grid.copy()
    cx, cy = cell_centers(prior.resolution)
    c1, s1 = math.cos(t1), math.sin(t1)
    wx = x1 + c1 * cx - s1 * cy
    wy = y1 + s1 * cx + c1 * cy
    c0, s0 = math.cos(t0), math.sin(t0)
    dx, dy = wx - x0, wy - y0
    px = c0 * dx + s0 * dy
    py = -s0 * dx + c0 * dy
    row, col = cell_of(px, py, prior.resolution)
    ok = (row >= 0) & (row < GRID) & (col >= 0) & (col < GRID)
    out = np.full((GRID, GRID), UNKNOWN, dtype=np.uint8)
    out[ok] = prior.grid[row[ok], col[ok]]
    return out


def build_costmap(cloud, prior: Costmap | None = None, pose=(0.0, 0.0, 0.0), *,
                  free_height: float = FREE_HEIGHT, blind_mask: np.ndarray | None = None,
                  res: float = RESOLUTION) -> Costmap:
    """Project a filtered robot-frame cloud into a costmap.

    Columns holding any point at or above ``free_height`` become OBSTACLE,
    columns holding only lower points become FREE; all other cells keep the
    scrolled prior (or UNKNOWN). Cells in ``blind_mask`` are never written.
    """
    pts = check_cloud(cloud)
    grid = scroll_costmap(prior, pose) if prior is not None else np.full((GRID, GRID), UNKNOWN, np.uint8)
    if len(pts):
        row, col = cell_of(pts[:, 0], pts[:, 1], res)
        ok = (row >= 0) & (row < GRID) & (col >= 0) & (col < GRID)
        flat = row[ok] * GRID + col[ok]
        high = pts[ok, 2] >= free_height
        seen = np.zeros(GRID * GRID, dtype=bool)
        seen[flat] = True
        occ = np.zeros(GRID * GRID, dtype=bool)
        occ[flat[high]] = True
        update = seen.reshape(GRID, GRID)
        if blind_mask is not None:
            update &= ~blind_mask
        grid[update] = np.where(occ.reshape(GRID, GRID)[update], OBSTACLE, FREE)
    return Costmap(grid, tuple(float(p) for p in pose), res)


def costmap_to_image(costmap: Costmap) -> np.ndarray:
    return PIXEL_CODES[costmap.grid]


def image_to_states(image: np.ndarray) -> np.ndarray:
    lut = np.full(256, 255, dtype=np.uint8)
    lut[255], lut[0], lut[127] = FREE, OBSTACLE, UNKNOWN
    states = lut[np.asarray(image, dtype=np.uint8)]
    if np.any(states == 255):
        raise ValueError("image holds pixel values outside {0, 127, 255}")
    return states


class CostmapPerception:
    """Stateful perception front end: filters each cloud and keeps the
    previous costmap as the scrolled prior for the next one."""

    def __init__(self, camera=None, leaf=0.05, k=50, std_mul=1.0, max_h=MAX_HEIGHT,
                 free_height=FREE_HEIGHT):
        from .world import CameraSpec

        self.camera = camera or CameraSpec()
        self.filters = make_filter_pipeline(leaf, k, std_mul, max_h).fit(np.zeros((0, 3)))
        self.free_height = free_height
        self.blind_mask = blind_wedge_mask(self.camera.h_fov, self.camera.range_min)
        self.costmap: Costmap | None = None

    def reset(self):
        self.costmap = None

    def update(self, cloud, pose) -> Costmap:
        filtered = self.filters.transform(cloud)
        self.costmap = build_costmap(filtered, self.costmap, pose, free_height=self.free_height,
                                     blind_mask=self.blind_mask)
        return self.costmap


# ---------------------------------------------------------------------------
# Debug I/O


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def load_xyz(path) -> np.ndarray:
    pts = np.loadtxt(path, dtype=float, ndmin=2)
    return check_cloud(pts.reshape(-1, 3) if pts.size else pts)


def save_xyz(path, cloud) -> None:
    np.savetxt(path, check_cloud(cloud), fmt="%.17g")
