import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drqn_nav.perception import (FREE, GRID, OBSTACLE, UNKNOWN, Costmap, CostmapPerception, HeightFilter,
                                 StatisticalOutlierRemover, VoxelDownsampler, blind_wedge_mask, build_costmap,
                                 cell_of, costmap_to_image, height_filter, image_to_states, load_xyz,
                                 make_filter_pipeline, read_pgm, remove_statistical_outliers, save_xyz,
                                 scroll_costmap, voxel_downsample, write_pgm)

from .oracles import costmap_oracle, sor_oracle, voxel_oracle

clouds = arrays(np.float64, st.tuples(st.integers(0, 60), st.just(3)),
                elements=st.floats(-3, 3, allow_nan=False, allow_infinity=False))


# -- voxel grid -----------------------------------------------------------------


def test_voxel_empty():
    assert voxel_downsample(np.zeros((0, 3))).shape == (0, 3)


def test_voxel_shared_cell_gives_center():
    out = voxel_downsample([(0.01, 0.01, 0.01), (0.04, 0.04, 0.04)])
    assert np.allclose(out, [[0.025, 0.025, 0.025]])


def test_voxel_matches_oracle_cube():
    pts = np.random.default_rng(0).random((1000, 3))
    out = voxel_downsample(pts)
    ref = voxel_oracle(pts, 0.05)
    assert len(out) == len(ref)
    assert np.abs(out - ref).max() < 1e-9


@settings(max_examples=100, deadline=None)
@given(clouds)
def test_voxel_properties(pts):
    out = voxel_downsample(pts)
    assert len(out) <= len(pts)
    assert np.array_equal(voxel_downsample(out), out)
    if len(pts):
        assert np.abs(out - voxel_oracle(pts, 0.05)).max() < 1e-9


def test_voxel_rejects_bad_input():
    with pytest.raises(ValueError):
        voxel_downsample([(0, 0, 0)], leaf=0)
    with pytest.raises(ValueError):
        voxel_downsample([(0, 0, np.nan)])
    with pytest.raises(ValueError):
        voxel_downsample(np.zeros((4, 2)))


# -- outlier removal -------------------------------------------------------------


def _grid(n=5, spacing=0.05):
    g = np.arange(n) * spacing
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)


def test_sor_regular_grid_matches_oracle():
    pts = _grid()
    out = remove_statistical_outliers(pts, 50, 1.0)
    assert np.array_equal(out, sor_oracle(pts, 50, 1.0))


def test_sor_removes_far_point_only():
    pts = np.vstack([_grid(), [[100.0, 100.0, 100.0]]])
    out = remove_statistical_outliers(pts, 50, 1.0)
    ref = sor_oracle(pts, 50, 1.0)
    assert np.array_equal(out, ref)
    assert not np.any(np.all(out == 100.0, axis=1))
    # removing the outlier changes the statistics, but the far point itself is the one to go
    assert len(out) < len(pts)


def test_sor_single_point_unchanged():
    assert np.array_equal(remove_statistical_outliers([(1.0, 2.0, 3.0)]), [[1.0, 2.0, 3.0]])


def test_sor_small_cloud_uses_all_neighbours():
    pts = np.random.default_rng(1).random((8, 3))
    assert np.array_equal(remove_statistical_outliers(pts, 50), sor_oracle(pts, 50, 1.0))


@settings(max_examples=60, deadline=None)
@given(clouds, st.integers(1, 10), st.floats(0.0, 2.0))
def test_sor_subset_and_order(pts, k, mul):
    out = remove_statistical_outliers(pts, k, mul)
    assert np.array_equal(out, sor_oracle(pts, k, mul))


def test_sor_rejects_bad_k():
    with pytest.raises(ValueError):
        remove_statistical_outliers([(0, 0, 0), (1, 1, 1)], k=0)


# -- height filter ------------------------------------------------------------------


def test_height_filter_cases():
    assert height_filter([(1, 0, 1.5)]).shape == (0, 3)
    assert np.array_equal(height_filter([(1, 0, 1.0)]), [[1, 0, 1.0]])
    assert np.array_equal(height_filter([(1, 0, 1.35)]), [[1, 0, 1.35]])


@given(clouds)
def test_height_filter_subset(pts):
    out = height_filter(pts)
    assert np.array_equal(out, pts[pts[:, 2] <= 1.35]) if len(pts) else len(out) == 0


def test_pipeline_matches_function_chain():
    pts = np.random.default_rng(2).uniform(-2, 2, (500, 3))
    pipe = make_filter_pipeline(k=10)
    ref = height_filter(remove_statistical_outliers(voxel_downsample(pts), 10))
    assert np.array_equal(pipe.fit_transform(pts), ref)
    assert pipe.get_params()["outliers__k"] == 10


def test_transformers_follow_estimator_api():
    for est in (VoxelDownsampler(0.1), StatisticalOutlierRemover(5, 2.0), HeightFilter(1.0)):
        params = est.get_params()
        clone = type(est)(**params)
        assert clone.get_params() == params
        assert est.fit(np.zeros((0, 3))) is est


# -- costmap ---------------------------------------------------------------------------


def test_single_floor_point_is_free():
    m = build_costmap([(1.0, 0.0, 0.03)])
    r, c = cell_of(1.0, 0.0)
    assert m.grid[r, c] == FREE
    assert (m.grid == UNKNOWN).sum() == GRID * GRID - 1


def test_obstacle_point_dominates_column():
    m = build_costmap([(1.0, 0.0, 0.03), (1.0, 0.0, 0.70)])
    assert m.grid[cell_of(1.0, 0.0)] == OBSTACLE


def test_obstacle_threshold_boundary():
    assert build_costmap([(1.0, 0.0, 0.05)]).grid[cell_of(1.0, 0.0)] == OBSTACLE
    assert build_costmap([(1.0, 0.0, 0.0499)]).grid[cell_of(1.0, 0.0)] == FREE


def test_points_outside_extent_are_ignored():
    m = build_costmap([(3.5, 0.0, 0.5), (0.0, -3.01, 0.5)])
    assert np.all(m.grid == UNKNOWN)


def test_cell_geometry():
    assert cell_of(0.0, 0.0) == (29, 29)
    assert cell_of(2.95, 2.95) == (0, 0)
    assert cell_of(-3.0, -3.0) == (59, 59)


@pytest.mark.parametrize("seed", range(10))
def test_costmap_matches_projection_oracle(seed):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(-3.5, 3.5, (200, 2)), rng.uniform(0.0, 0.2, 200)])
    mask = blind_wedge_mask()
    assert np.array_equal(build_costmap(pts, blind_mask=mask).grid, costmap_oracle(pts, mask=mask))
    assert np.array_equal(build_costmap(pts).grid, costmap_oracle(pts))


def test_blind_wedge_never_updated():
    mask = blind_wedge_mask()
    assert mask[cell_of(0.5, 0.0)] and not mask[cell_of(-0.5, 0.0)] and not mask[cell_of(1.0, 0.0)]
    m = build_costmap([(0.5, 0.0, 0.5)], blind_mask=mask)
    assert m.grid[cell_of(0.5, 0.0)] == UNKNOWN


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-25, 25), st.integers(-25, 25), st.booleans()), max_size=40),
       st.floats(-0.03, 0.03), st.floats(-0.03, 0.03))
def test_translation_shifts_one_row(cells, jx, jy):
    pts = np.array([((i + 0.5) * 0.1 + jx, (j + 0.5) * 0.1 + jy, 0.5 if high else 0.0) for i, j, high in cells],
                   dtype=float).reshape(-1, 3)
    a = build_costmap(pts).grid
    shifted = pts + [0.1, 0.0, 0.0]
    b = build_costmap(shifted).grid
    # a point one cell further forward appears one row higher
    assert np.array_equal(b[:-1][a[1:] != UNKNOWN], a[1:][a[1:] != UNKNOWN])


def test_scroll_identity_and_translation():
    grid = np.full((GRID, GRID), UNKNOWN, np.uint8)
    grid[cell_of(1.05, 0.05)] = OBSTACLE
    prior = Costmap(grid, (0.0, 0.0, 0.0))
    assert np.array_equal(scroll_costmap(prior, (0.0, 0.0, 0.0)), grid)
    moved = scroll_costmap(prior, (0.5, 0.0, 0.0))
    assert moved[cell_of(0.55, 0.05)] == OBSTACLE
    assert (moved == OBSTACLE).sum() == 1
    turned = scroll_costmap(prior, (0.0, 0.0, math.pi / 2))
    # obstacle 1 m ahead now lies 1 m to the right
    assert turned[cell_of(0.05, -1.05)] == OBSTACLE


def test_prior_cells_persist_outside_view():
    first = build_costmap([(-1.0, 0.0, 0.5)])
    second = build_costmap([(2.0, 0.0, 0.0)], prior=first, pose=(0.0, 0.0, 0.0))
    assert second.grid[cell_of(-1.0, 0.0)] == OBSTACLE
    assert second.grid[cell_of(2.0, 0.0)] == FREE


# -- image codes and I/O ----------------------------------------------------------------


def test_image_codes():
    assert np.all(costmap_to_image(Costmap.unknown()) == 127)
    g = np.full((GRID, GRID), UNKNOWN, np.uint8)
    g[30, 30] = OBSTACLE
    img = costmap_to_image(Costmap(g))
    assert (img == 0).sum() == 1 and img[30, 30] == 0


@given(arrays(np.uint8, (GRID, GRID), elements=st.sampled_from([FREE, OBSTACLE, UNKNOWN])))
def test_image_round_trip(grid):
    img = costmap_to_image(Costmap(grid))
    assert set(np.unique(img)) <= {0, 127, 255}
    assert np.array_equal(image_to_states(img), grid)


def test_image_to_states_rejects_other_codes():
    with pytest.raises(ValueError):
        image_to_states(np.full((GRID, GRID), 5, np.uint8))


def test_pgm_round_trip(tmp_path):
    img = costmap_to_image(build_costmap([(1.0, 0.0, 0.5), (2.0, 1.0, 0.0)]))
    write_pgm(tmp_path / "m.pgm", img)
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n60 60\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), img)


def test_xyz_round_trip(tmp_path):
    pts = np.random.default_rng(3).random((10, 3))
    save_xyz(tmp_path / "c.xyz", pts)
    assert np.array_equal(load_xyz(tmp_path / "c.xyz"), pts)


def test_perception_front_end_state():
    p = CostmapPerception()
    m1 = p.update(np.array([[1.5, 0.0, 0.5]]), (0.0, 0.0, 0.0))
    assert m1.grid[cell_of(1.5, 0.0)] == OBSTACLE
    p.reset()
    assert p.costmap is None
