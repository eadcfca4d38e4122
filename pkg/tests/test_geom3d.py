import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vrk import geom3d
from vrk.geom3d import AnchorConfig, Box3D, ScoredBox
from vrk.harness.checks import monte_carlo_iou_3d, monte_carlo_iou_bev
from vrk.voxelizer import KITTI, voxel_center


def unit(cx=0.0, cy=0.0, yaw=0.0, cz=0.0, h=1.0):
    return Box3D(cx, cy, cz, 1.0, 1.0, h, yaw)


finite = st.floats(-50, 50, allow_nan=False)
dim = st.floats(0.2, 6.0)
boxes = st.builds(Box3D, finite, finite, st.floats(-3, 3), dim, dim, dim, st.floats(-math.pi, math.pi))


def test_box_rejects_bad_dims():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 0.0, 1, 1, 0)
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 1, float("nan"), 1, 0)


def test_yaw_normalized():
    b = Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi)
    assert -math.pi <= b.yaw < math.pi
    assert math.isclose(abs(b.yaw), math.pi)


def test_iou_bev_examples():
    assert geom3d.iou_bev(unit(), unit()) == pytest.approx(1.0)
    assert geom3d.iou_bev(unit(), unit(cx=10.0)) == 0.0
    # regular octagon overlap: 2(sqrt2 - 1) / (2 - 2(sqrt2 - 1)) = 1/sqrt2
    assert geom3d.iou_bev(unit(), unit(yaw=math.pi / 4)) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_iou_3d_examples():
    assert geom3d.iou_3d(unit(), unit()) == pytest.approx(1.0)
    a = Box3D(0, 0, 0.5, 1, 1, 1, 0)
    b = Box3D(0, 0, 1.0, 1, 1, 1, 0)
    assert geom3d.iou_3d(a, b) == pytest.approx(1 / 3)


def test_iou_matches_monte_carlo():
    a = np.array([0.3, -0.2, 0.1, 3.0, 1.6, 1.5, 0.4])
    b = np.array([0.9, 0.4, 0.4, 4.0, 1.8, 1.2, -0.7])
    assert geom3d.iou_bev(a, b) == pytest.approx(monte_carlo_iou_bev(a, b, seed=3), abs=2e-3)
    assert geom3d.iou_3d(a, b) == pytest.approx(monte_carlo_iou_3d(a, b, seed=4), abs=2e-3)


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    a = np.column_stack([rng.uniform(-3, 3, (6, 3)), rng.uniform(0.5, 3, (6, 3)), rng.uniform(-3, 3, 6)])
    b = np.column_stack([rng.uniform(-3, 3, (5, 3)), rng.uniform(0.5, 3, (5, 3)), rng.uniform(-3, 3, 5)])
    for kind, fn in (("bev", geom3d.iou_bev), ("3d", geom3d.iou_3d)):
        m = geom3d.iou_matrix(a, b, kind)
        ref = np.array([[fn(x, y) for y in b] for x in a])
        np.testing.assert_allclose(m, ref, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    for fn in (geom3d.iou_bev, geom3d.iou_3d):
        ab, ba = fn(a, b), fn(b, a)
        assert 0.0 <= ab <= 1.0 + 1e-12
        assert ab == pytest.approx(ba, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(boxes, boxes, finite, finite)
def test_iou_translation_invariant(a, b, dx, dy):
    before = geom3d.iou_3d(a, b)
    after = geom3d.iou_3d(a.translated(dx, dy, 0.3), b.translated(dx, dy, 0.3))
    assert after == pytest.approx(before, abs=1e-7)


def test_nms_examples():
    b = unit()
    assert geom3d.nms([ScoredBox(b, 0.5)], 0.5) == [0]
    assert geom3d.nms([ScoredBox(b, 0.8), ScoredBox(b, 0.9)], 0.1) == [1]
    far = [ScoredBox(unit(cx=10.0 * i), s) for i, s in enumerate([0.2, 0.9, 0.5])]
    assert geom3d.nms(far, 0.0) == [1, 2, 0]


@settings(max_examples=40, deadline=None)
@given(st.permutations(list(range(6))))
def test_nms_permutation_equivariant(perm):
    rng = np.random.default_rng(1)
    arr = np.column_stack([rng.uniform(0, 4, (6, 2)), np.zeros(6), np.full((6, 3), 1.5), rng.uniform(-1, 1, 6)])
    scores = rng.permutation(6) / 6.0 + 0.05
    base = {tuple(arr[i]) for i in geom3d.nms_arrays(arr, scores, 0.2)}
    perm = np.array(perm)
    got = {tuple(arr[perm][i]) for i in geom3d.nms_arrays(arr[perm], scores[perm], 0.2)}
    assert got == base


def test_encode_examples():
    a = Box3D(0, 0, 0, 3.9, 1.6, 1.56, 0)
    np.testing.assert_allclose(geom3d.encode_box(a, a), np.zeros(7), atol=1e-15)
    r = geom3d.encode_box(a, a.translated(dx=1.0))
    assert r[0] == pytest.approx(1 / math.hypot(3.9, 1.6))
    assert r[0] == pytest.approx(0.2372, abs=1e-4)
    np.testing.assert_allclose(r[1:], 0.0, atol=1e-15)


def test_decode_examples():
    a = Box3D(1, 2, -1, 3.9, 1.6, 1.56, 0.3)
    assert geom3d.decode_box(a, np.zeros(7)) == a
    d = geom3d.decode_box(a, [0, 0, 0, 0, 0, 0, 2 * math.pi])
    assert d.yaw == pytest.approx(a.yaw)


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_encode_decode_roundtrip(anchor, gt):
    back = geom3d.decode_box(anchor, geom3d.encode_box(anchor, gt))
    np.testing.assert_allclose(back.to_array()[:6], gt.to_array()[:6], atol=1e-6, rtol=1e-9)
    dyaw = geom3d.normalize_yaw(back.yaw - gt.yaw)
    assert abs(dyaw) < 1e-6


def test_anchor_counts_and_order():
    cfg = AnchorConfig()
    one = geom3d.anchor_array(cfg, (1, 1), KITTI)
    assert one.shape == (2, 7)
    np.testing.assert_allclose(one[0, :3], one[1, :3])
    assert [round(y, 6) for y in one[:, 6]] == [0.0, round(math.pi / 2, 6)]
    four = geom3d.anchor_array(cfg, (2, 2), KITTI)
    assert len(four) == 8
    # y outer, x inner, yaw innermost
    assert four[2, 0] > four[0, 0] and four[2, 1] == four[0, 1]
    assert four[4, 1] > four[0, 1]


def test_anchor_centers_match_voxel_centers():
    cfg = AnchorConfig()
    anchors = geom3d.anchor_array(cfg, (4, 3), KITTI)
    for idx in range(0, len(anchors), 2):
        cell = idx // 2
        i, j = cell % 4, cell // 4
        cx, cy, _ = voxel_center((i, j, 0), KITTI, cfg.bev_stride)
        assert anchors[idx, 0] == pytest.approx(cx)
        assert anchors[idx, 1] == pytest.approx(cy)
        assert anchors[idx, 2] == cfg.z_center


def test_text_and_json_roundtrip(tmp_path):
    items = [Box3D(1.5, -2.25, -1.0, 3.9, 1.6, 1.56, 0.5), ScoredBox(Box3D(0, 0, 0, 1, 2, 3, -1.0), 0.75)]
    path = tmp_path / "b.txt"
    geom3d.write_boxes_text(path, items)
    back = geom3d.read_boxes_text(path)
    assert isinstance(back[0], Box3D) and isinstance(back[1], ScoredBox)
    assert back[1].score == 0.75
    np.testing.assert_allclose(back[0].to_array(), items[0].to_array(), atol=1e-6)
    assert geom3d.boxes_from_json(geom3d.boxes_to_json(items)) == items


def test_read_boxes_bad_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 2 3\n")
    with pytest.raises(ValueError):
        geom3d.read_boxes_text(path)
