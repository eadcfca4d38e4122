import math

import numpy as np
import pytest

from vrk import roipool, sparsenet
from vrk.geom3d import Box3D
from vrk.roipool import AggregatorWeights, MacCounter, RoiPoolConfig
from vrk.voxelizer import KITTI, SparseVoxelGrid, VoxelizationConfig, empty_grid

CFG = VoxelizationConfig(range_min=(0, 0, 0), range_max=(4.8, 4.8, 4.8), voxel_size=(0.2, 0.2, 0.2))


def random_grid(rng, n, c):
    flat = rng.choice(24 ** 3, size=n, replace=False)
    coords = np.stack(np.unravel_index(flat, (24,) * 3), axis=1)
    return SparseVoxelGrid(coords, rng.normal(size=(n, c)), 1, (24,) * 3, CFG)


def test_grid_points_examples():
    box = Box3D(1.0, 2.0, 3.0, 2.0, 1.0, 1.5, 0.7)
    np.testing.assert_allclose(roipool.roi_grid_points(box, 1), [[1.0, 2.0, 3.0]])
    cube = roipool.roi_grid_points(Box3D(0, 0, 0, 1, 1, 1, 0), 2)
    expected = {(x, y, z) for x in (-0.25, 0.25) for y in (-0.25, 0.25) for z in (-0.25, 0.25)}
    assert {tuple(np.round(p, 12)) for p in cube} == expected
    # x fastest
    assert cube[0, 0] < cube[1, 0] and cube[0, 1] == cube[1, 1]


def test_grid_points_rotation():
    box = Box3D(0, 0, 0, 2.0, 1.0, 1.0, math.pi / 2)
    pts = roipool.roi_grid_points(box, 2)
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    local = roipool.roi_grid_points(Box3D(0, 0, 0, 2.0, 1.0, 1.0, 0.0), 2)
    np.testing.assert_allclose(pts, local @ rot.T, atol=1e-12)
    # local +x offset of 0.5 ends up along world +y
    assert pts[1, 1] - pts[0, 1] == pytest.approx(1.0)


def test_original_k1_and_zero():
    rng = np.random.default_rng(0)
    w = AggregatorWeights.random(4, 6, rng)
    f = rng.normal(size=(3, 1, 4))
    rel = rng.normal(size=(3, 1, 3))
    out = roipool.aggregate_original(rel, f, np.ones((3, 1), bool), w)
    ref = np.maximum(np.concatenate([f[:, 0], rel[:, 0]], 1) @ w.weight.T + w.bias, 0)
    np.testing.assert_allclose(out, ref)
    zero = AggregatorWeights(w.weight, np.zeros(6))
    assert not roipool.aggregate_original(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)), np.ones((2, 3), bool), zero).any()


def test_original_duplicates_idempotent():
    rng = np.random.default_rng(1)
    w = AggregatorWeights.random(4, 5, rng)
    f = rng.normal(size=(1, 2, 4))
    rel = rng.normal(size=(1, 2, 3))
    base = roipool.aggregate_original(rel, f, np.ones((1, 2), bool), w)
    dup = roipool.aggregate_original(np.repeat(rel, 3, 1), np.repeat(f, 3, 1), np.ones((1, 6), bool), w)
    np.testing.assert_allclose(base, dup)


def test_weight_split_roundtrip():
    rng = np.random.default_rng(2)
    w = AggregatorWeights.random(8, 4, rng)
    back = AggregatorWeights.from_parts(w.w_feat, w.w_coord, w.bias)
    np.testing.assert_array_equal(back.weight, w.weight)


def test_accelerated_matches_original():
    rng = np.random.default_rng(3)
    grid = random_grid(rng, 400, 16)
    w = AggregatorWeights.random(16, 32, rng)
    pts = rng.uniform(0, 4.8, size=(100, 3))
    for thr, k in ((2, 16), (4, 8), (1, 1)):
        a = roipool.pool_points(grid, pts, thr, k, w, "original")
        b = roipool.pool_points(grid, pts, thr, k, w, "accelerated")
        np.testing.assert_allclose(b, a, rtol=1e-5, atol=1e-9)


def test_zero_relcoords_only_feature_path():
    rng = np.random.default_rng(4)
    grid = random_grid(rng, 50, 4)
    w = AggregatorWeights.random(4, 6, rng)
    rows = rng.integers(0, 50, size=(5, 3))
    pre = roipool.pretransform(grid, w)
    a = roipool.aggregate_accelerated(grid, pre, rows, np.zeros((5, 3, 3)), w)
    w2 = AggregatorWeights.from_parts(w.w_feat, w.w_coord * 7.0, w.bias)
    b = roipool.aggregate_accelerated(grid, roipool.pretransform(grid, w2), rows, np.zeros((5, 3, 3)), w2)
    np.testing.assert_allclose(a, b)


def test_stale_pretransform_rejected():
    rng = np.random.default_rng(5)
    grid = random_grid(rng, 30, 4)
    w = AggregatorWeights.random(4, 6, rng)
    with pytest.raises(ValueError, match="pretransformed"):
        roipool.aggregate_accelerated(grid, np.zeros((29, 6)), np.zeros((1, 1), int), np.zeros((1, 1, 3)), w)


def test_flop_formulas():
    m = 100 * 6 ** 3
    assert m == 21600
    assert roipool.flop_count("original", 0, m, 16, 64, 32) == 740_966_400
    assert roipool.flop_count("accelerated", 16000, m, 16, 64, 32) == 65_945_600
    ratio = 740_966_400 / 65_945_600
    assert ratio == pytest.approx(11.24, abs=0.01)
    with pytest.raises(ValueError):
        roipool.flop_count("other", 1, 1, 1, 1, 1)


def test_counter_matches_formula():
    rng = np.random.default_rng(6)
    grid = random_grid(rng, 300, 8)
    w = AggregatorWeights.random(8, 4, rng)
    pts = rng.uniform(0, 4.8, size=(37, 3))
    for mode in ("original", "accelerated"):
        counter = MacCounter()
        roipool.pool_points(grid, pts, 2, 5, w, mode, counter)
        assert counter.count == roipool.flop_count(mode, len(grid), 37, 5, 8, 4)


def net_weights():
    return roipool.aggregator_weights(sparsenet.init_params(0))


def test_roi_pool_width_and_empty():
    stages = [empty_grid(KITTI, 4, 48), empty_grid(KITTI, 8, 64)]
    rois = np.array([[10.0, 0.0, -1.0, 3.9, 1.6, 1.56, 0.3], [20.0, 5.0, -1.0, 3.9, 1.6, 1.56, 1.0]])
    feats = roipool.voxel_roi_pool(stages, rois, RoiPoolConfig(), net_weights())
    assert feats.flat.shape == (2, 27648)
    assert not feats.flat.any()
    assert not feats.outside.any()


def test_roi_pool_paths_agree_and_threads():
    rng = np.random.default_rng(7)
    coords3 = np.column_stack([rng.integers(40, 80, 2000), rng.integers(180, 220, 2000), rng.integers(0, 10, 2000)])
    coords3 = np.unique(coords3, axis=0)
    coords4 = np.unique(coords3 // 2, axis=0)
    s3 = SparseVoxelGrid(coords3, rng.uniform(size=(len(coords3), 48)), 4, KITTI.dims_at(4), KITTI)
    s4 = SparseVoxelGrid(coords4, rng.uniform(size=(len(coords4), 64)), 8, KITTI.dims_at(8), KITTI)
    rois = np.column_stack([rng.uniform(17, 30, 20), rng.uniform(-4, 4, 20), np.full(20, -1.0),
                            np.full(20, 3.9), np.full(20, 1.6), np.full(20, 1.56), rng.uniform(-3, 3, 20)])
    w = net_weights()
    a = roipool.voxel_roi_pool([s3, s4], rois, RoiPoolConfig(), w, "original")
    b = roipool.voxel_roi_pool([s3, s4], rois, RoiPoolConfig(), w, "accelerated")
    c = roipool.voxel_roi_pool([s3, s4], rois, RoiPoolConfig(), w, "accelerated", threads=3)
    assert a.flat.any()
    np.testing.assert_allclose(b.flat, a.flat, rtol=1e-5, atol=1e-9)
    assert b.flat.tobytes() == c.flat.tobytes()


def test_roi_outside_range_flagged():
    stages = [empty_grid(KITTI, 4, 48), empty_grid(KITTI, 8, 64)]
    rois = np.array([[500.0, 500.0, 0.0, 3.9, 1.6, 1.56, 0.0]])
    feats = roipool.voxel_roi_pool(stages, rois, RoiPoolConfig(), net_weights())
    assert feats.outside.tolist() == [True]


def test_detect_head():
    head = roipool.HeadParams.zeros(27648)
    conf, resid = roipool.detect_head_forward(np.ones((3, 27648)), head)
    assert conf.shape == (3, 1) and resid.shape == (3, 7)
    np.testing.assert_allclose(conf, 0.5)
    assert not resid.any()
    full = roipool.HeadParams.from_network(sparsenet.init_params(1))
    x = np.random.default_rng(0).uniform(size=(2, 27648))
    a = roipool.detect_head_forward(x, full)
    b = roipool.detect_head_forward(x, roipool.HeadParams.from_network(sparsenet.init_params(1)))
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        roipool.detect_head_forward(np.ones((1, 5)), head)
