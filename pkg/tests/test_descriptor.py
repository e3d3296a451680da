import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from crowdanomaly.descriptor import (
    DescriptorParams,
    ShapeHistogram,
    TrajectoryShapeDescriptor,
    bin_indices,
    bin_of,
    build_grid,
    describe_clip,
    describe_patch,
    split,
)
from crowdanomaly.exceptions import GeometryMismatch, InvalidPatchSize
from crowdanomaly.flow_io import FlowField
from crowdanomaly.trajectory import TrajectorySet, advect


def const_clip(u, v, T=10, H=12, W=12):
    return advect([FlowField(np.full((H, W), u), np.full((H, W), v))] * (T - 1))


def test_ucsd_grid():
    g = build_grid(158, 238, 3, 3)
    assert (g.cols, g.rows, g.M) == (52, 79, 4108)
    assert g.width - g.cols * 3 == 2 and g.height - g.rows * 3 == 1


def test_large_frame_grid():
    g = build_grid(512, 384, 20, 20)
    assert (g.cols, g.rows, g.M) == (25, 19, 475)


def test_full_width_patch():
    assert build_grid(17, 9, 17, 3).cols == 1


@pytest.mark.parametrize("pw,ph", [(0, 3), (3, 0), (13, 3), (3, 13)])
def test_patch_must_fit(pw, ph):
    with pytest.raises(InvalidPatchSize):
        build_grid(12, 12, pw, ph)


def test_bin_examples():
    assert bin_of((0, 0), 8, 8, 9.0) == 0
    assert bin_of((1, 0), 2, 4, 4.0) == 0
    assert bin_of((3, 3), 2, 4, 4.0) == 4


def test_bin_sectors_counter_clockwise_from_positive_x():
    # y grows downward in image coordinates, so (0, 1) is a quarter turn from +x
    assert [bin_of(p, 1, 4, 10.0) for p in [(1, 0), (0, 1), (-1, 0), (0, -1)]] == [0, 1, 2, 3]


@given(st.integers(-40, 40), st.integers(-40, 40), st.integers(1, 12), st.integers(1, 16),
       st.floats(0.5, 30))
def test_bin_matches_edge_walk(dx, dy, n_mag, n_ang, r_max):
    b = bin_of((dx, dy), n_mag, n_ang, r_max)
    assert 0 <= b < n_mag * n_ang
    assert b == oracles.polar_bin(dx, dy, n_mag, n_ang, r_max)


def test_zero_flow_masses_origin_bin():
    traj = const_clip(0.0, 0.0)
    grid = build_grid(12, 12, 3, 3)
    h = describe_patch(traj, grid, 5, DescriptorParams.for_clip_length(10))
    assert h.counts[0] == 9 * 9 and h.counts.sum() == 81


def test_unit_flow_ring_counts_exact():
    """81 points at r = 1..9, nine of each.  Rings are half-open, so r = k lands in
    ring min(k, 8): ring 0 stays empty and the outer ring takes r = 8 and r = 9."""
    traj = const_clip(1.0, 0.0, W=30)
    grid = build_grid(30, 12, 3, 3)
    h = np.asarray(describe_patch(traj, grid, 0, DescriptorParams(9, 8, 9.0)).counts).reshape(9, 8)
    assert h[:, 1:].sum() == 0
    assert h[:, 0].tolist() == [0, 9, 9, 9, 9, 9, 9, 9, 18]


def test_split_example():
    h = ShapeHistogram(2, 2, 4.0, np.array([1, 2, 3, 4]))
    s = split(h)
    assert s.mag.tolist() == [3, 7] and s.ang.tolist() == [4, 6]
    z = split(ShapeHistogram(2, 2, 4.0, np.zeros(4, dtype=int)))
    assert not z.mag.any() and not z.ang.any()


@given(st.lists(st.integers(0, 1000), min_size=12, max_size=12))
def test_split_conserves_mass(counts):
    s = split(ShapeHistogram(3, 4, 9.0, np.array(counts)))
    assert s.mag.sum() == s.ang.sum() == sum(counts)


@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 4), st.integers(2, 7))
def test_describe_clip_matches_oracle(seed, pw, ph, T):
    rng = np.random.default_rng(seed)
    H, W = 9, 10
    fl = [FlowField(rng.normal(0, 1.5, (H, W)), rng.normal(0, 1.5, (H, W))) for _ in range(T - 1)]
    traj = advect(fl)
    grid = build_grid(W, H, pw, ph)
    params = DescriptorParams.for_clip_length(T, 4, 6)
    counts, moving = describe_clip(traj, grid, params)
    assert counts.shape == (grid.M, 24)
    for m in range(grid.M):
        ys, xs = grid.bounds(m)
        paths = [traj.trajectory(w, h) for h in range(ys.start, ys.stop)
                 for w in range(xs.start, xs.stop)]
        assert counts[m].tolist() == oracles.patch_histogram(paths, 4, 6, params.r_max)
        assert moving[m] == sum(p != path[0] for path in paths for p in path[1:])
        assert counts[m].tolist() == describe_patch(traj, grid, m, params).counts.tolist()
        assert counts[m].sum() == (T - 1) * pw * ph


def test_rotation_moves_sector():
    """Rotating all motion by a quarter turn shifts every point two sectors (of 8)."""
    grid = build_grid(24, 24, 3, 3)
    p = DescriptorParams(4, 8, 6.0)
    a, _ = describe_clip(const_clip(1.0, 0.0, T=5, H=24, W=24), grid, p)
    b, _ = describe_clip(const_clip(0.0, 1.0, T=5, H=24, W=24), grid, p)
    m = grid.location(2, 2)
    assert np.array_equal(np.roll(a[m].reshape(4, 8), 2, axis=1), b[m].reshape(4, 8))


def test_geometry_checked():
    grid = build_grid(12, 12, 3, 3)
    with pytest.raises(GeometryMismatch):
        describe_clip(const_clip(0, 0, H=9, W=12), grid, DescriptorParams())


def test_rasterize_expands_cells_and_leaves_margin():
    g = build_grid(7, 5, 3, 2)
    cells = np.array([[1, 0], [0, 1]])
    img = g.rasterize(cells)
    assert img.shape == (5, 7)
    assert img[:2, :3].all() and img[2:4, 3:6].all()
    assert img.sum() == 12 and not img[:, 6].any() and not img[4].any()


def test_transformer_api():
    clips = [const_clip(1.0, 0.0), const_clip(0.0, 0.0)]
    est = TrajectoryShapeDescriptor(patch_w=4, patch_h=4)
    out = est.fit_transform(clips)
    assert out.shape == (2, 9, 64)
    assert est.params_.r_max == 9.0
    assert est.get_params()["patch_w"] == 4
    with pytest.raises(GeometryMismatch):
        est.transform([const_clip(0.0, 0.0, T=5)])


def test_trajectory_set_shape():
    x = np.zeros((3, 2, 4), dtype=np.int32)
    t = TrajectorySet(x, x)
    assert (t.T, t.height, t.width) == (3, 2, 4)
    assert math.isclose(DescriptorParams.for_clip_length(10).r_max, 9.0)
    assert bin_indices([0, 9], [0, 0], 8, 8, 9.0).tolist() == [0, 56]
