import numpy as np
import pytest

from vrk import geom3d, sparsenet
from vrk.harness.checks import dense_conv3d_reference
from vrk.sparsenet import ConvLayerParams, NetworkConfig
from vrk.voxelizer import KITTI, SparseVoxelGrid, VoxelizationConfig, empty_grid, to_bev

SMALL = VoxelizationConfig(range_min=(0, 0, 0), range_max=(3.2, 3.2, 4.0), voxel_size=(0.1, 0.1, 0.1))


def random_grid(rng, n, c, dims=(32, 32, 40), cfg=SMALL):
    flat = rng.choice(int(np.prod(dims)), size=n, replace=False)
    coords = np.stack(np.unravel_index(flat, dims), axis=1)
    return SparseVoxelGrid(coords, rng.uniform(0, 1, (n, c)), 1, dims, cfg)


def test_identity_submanifold():
    rng = np.random.default_rng(0)
    grid = random_grid(rng, 50, 3)
    w = np.zeros((3, 3, 3, 3, 3))
    w[:, :, 1, 1, 1] = np.eye(3)
    out = sparsenet.sparse_conv3d(grid, ConvLayerParams("id", w, np.zeros(3), 1, "submanifold"))
    rows = out.lookup(grid.coords)
    np.testing.assert_allclose(out.features[rows], grid.features)
    assert len(out) == len(grid)


def test_regular_dense_oracle():
    rng = np.random.default_rng(1)
    dims = (8, 8, 8)
    coords = np.stack(np.meshgrid(*[np.arange(8)] * 3, indexing="ij"), -1).reshape(-1, 3)
    feats = rng.normal(size=(len(coords), 2))
    grid = SparseVoxelGrid(coords, feats, 1, dims, SMALL)
    layer = ConvLayerParams("r", rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3), 2, "regular")
    out = sparsenet.sparse_conv3d(grid, layer, relu=False)
    dense = np.zeros(dims + (2,))
    dense[tuple(coords.T)] = feats
    ref = dense_conv3d_reference(dense, layer.weight, layer.bias, 2)
    assert out.dims == (4, 4, 4)
    np.testing.assert_allclose(out.features, ref[tuple(out.coords.T)], atol=1e-5)


def test_stride2_single_voxel():
    grid = SparseVoxelGrid(np.array([[3, 3, 3]]), np.ones((1, 1)), 1, (8, 8, 8), SMALL)
    layer = ConvLayerParams("r", np.ones((1, 1, 3, 3, 3)), np.zeros(1), 2, "regular")
    out = sparsenet.sparse_conv3d(grid, layer)
    assert (1, 1, 1) in {tuple(c) for c in out.coords}
    assert out.stride == 2


def test_layer_channel_mismatch():
    grid = SparseVoxelGrid(np.array([[0, 0, 0]]), np.ones((1, 2)), 1, (4, 4, 4), SMALL)
    with pytest.raises(ValueError, match="input channels"):
        sparsenet.sparse_conv3d(grid, ConvLayerParams("x", np.zeros((1, 3, 3, 3, 3)), np.zeros(1), 1, "submanifold"))


def test_backbone_stage_dims():
    params = sparsenet.init_params(0)
    stages = sparsenet.backbone3d_forward(empty_grid(KITTI, 1, 4), params)
    assert [s.dims for s in stages] == [(1408, 1600, 40), (704, 800, 20), (352, 400, 10), (176, 200, 5)]
    assert [s.num_channels for s in stages] == [16, 32, 48, 64]
    assert all(len(s) == 0 for s in stages)


def test_backbone_nonempty_propagates():
    rng = np.random.default_rng(3)
    params = sparsenet.init_params(0)
    stages = sparsenet.backbone3d_forward(random_grid(rng, 30, 4), params)
    assert [s.stride for s in stages] == [1, 2, 4, 8]
    assert all(len(s) > 0 for s in stages)


def tiny_params(seed=0):
    return sparsenet.init_params(seed, NetworkConfig(bev_channels=(8, 16), bev_layers=(2, 2)))


def test_backbone2d_shapes():
    params = sparsenet.init_params(0)
    bev = np.zeros((22, 25, 320))
    assert sparsenet.backbone2d_forward(bev, params).shape == (22, 25, 192)
    with pytest.raises(ValueError):
        sparsenet.backbone2d_forward(np.zeros((4, 4, 10)), params)


def test_backbone2d_zero_and_homogeneous():
    params = tiny_params()
    for layer in params.layers.values():
        layer.bias[:] = 0.0
    zero = sparsenet.backbone2d_forward(np.zeros((6, 6, 320)), params)
    assert not zero.any()
    x = np.random.default_rng(0).uniform(size=(6, 6, 320))
    layer = params["bev1_1"]
    np.testing.assert_allclose(sparsenet.conv2d(2 * x, layer, relu=False), 2 * sparsenet.conv2d(x, layer, relu=False))


def test_conv2d_matches_loop():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(5, 7, 3))
    layer = ConvLayerParams("c", rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), 2, None)
    out = sparsenet.conv2d(x, layer, relu=False)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            patch = xp[2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref = np.einsum("abi,oiab->o", patch, layer.weight) + layer.bias
            np.testing.assert_allclose(out[i, j], ref, atol=1e-12)


def test_rpn_caps_and_determinism():
    params = sparsenet.init_params(0)
    rng = np.random.default_rng(0)
    feats = rng.uniform(size=(12, 12, 192))
    anchors = geom3d.anchor_array(geom3d.AnchorConfig(), (12, 12), KITTI)
    a = sparsenet.rpn_forward(feats, anchors, params)
    b = sparsenet.rpn_forward(feats, anchors, params)
    assert len(a) <= 100
    np.testing.assert_array_equal(a.boxes, b.boxes)
    one = sparsenet.rpn_forward(feats[:1, :1], anchors[:2], params)
    assert len(one) <= 2


def test_rpn_anchor_mismatch():
    params = sparsenet.init_params(0)
    with pytest.raises(ValueError):
        sparsenet.rpn_forward(np.zeros((2, 2, 192)), np.zeros((3, 7)), params)


def test_params_seeded_and_roundtrip(tmp_path):
    a, b = sparsenet.init_params(4), sparsenet.init_params(4)
    for name in a.layers:
        np.testing.assert_array_equal(a[name].weight, b[name].weight)
    assert not np.array_equal(a["conv1_1"].weight, sparsenet.init_params(5)["conv1_1"].weight)
    sparsenet.save_params(a, tmp_path / "w1")
    loaded = sparsenet.load_params(tmp_path / "w1")
    sparsenet.save_params(loaded, tmp_path / "w2")
    for f in sorted((tmp_path / "w1").iterdir()):
        assert f.read_bytes() == (tmp_path / "w2" / f.name).read_bytes()


def test_params_audit():
    p = sparsenet.init_params(0)
    p.audit()
    shapes = {s["name"]: s["shape"] for s in sparsenet.layer_specs(p.config)}
    assert [shapes[f"conv{s}_2"][0] for s in range(1, 5)] == [16, 32, 48, 64]
    assert shapes["head_fc1"] == (256, 27648)
    assert p.config.fused_channels == 192
    p.layers["conv2_1"] = ConvLayerParams("conv2_1", np.zeros((32, 15, 3, 3, 3)), np.zeros(32), 2, "regular")
    with pytest.raises(ValueError, match="conv2_1"):
        p.audit()


def test_load_truncated_blob(tmp_path):
    sparsenet.save_params(sparsenet.init_params(0), tmp_path)
    blob = tmp_path / "rpn_cls.weight.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ValueError, match="rpn_cls"):
        sparsenet.load_params(tmp_path)


def test_to_bev_feeds_backbone2d():
    rng = np.random.default_rng(0)
    cfg = VoxelizationConfig(range_min=(0, 0, 0), range_max=(3.2, 3.2, 4.0), voxel_size=(0.1, 0.1, 0.1))
    params = sparsenet.init_params(0)
    stages = sparsenet.backbone3d_forward(random_grid(rng, 40, 4, cfg=cfg), params)
    bev = to_bev(stages[-1])
    assert bev.shape == (4, 4, 320)
    assert sparsenet.backbone2d_forward(bev, params).shape == (4, 4, 192)
