"""Voxel RoI pooling and the refinement head.

Each RoI is split into G^3 sub-voxels; every sub-voxel center gathers its
voxel-query neighbors from the last two backbone stages at two Manhattan
radii, and a shared linear+ReLU layer followed by a channel-wise max turns
each group into a fixed-width vector.

Aggregator weight columns are laid out as ``[W_F | W_C]``: the first C
columns act on voxel features, the last three on relative coordinates.
"""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import geom3d
from .sparsenet import NetworkParams, sigmoid
from .voxelizer import SparseVoxelGrid
from .vquery import voxel_query_batch

ROI_CHUNK = 8  # RoIs per work item; fixed so results do not depend on thread count


@dataclass(frozen=True)
class RoiPoolConfig:
    grid_size: int = 6
    thresholds: tuple = (2, 4)
    k: int = 16
    out_channels: int = 32

    def __post_init__(self):
        if self.grid_size < 1:
            raise ValueError("grid size must be >= 1")
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")


@dataclass
class AggregatorWeights:
    weight: np.ndarray  # (C', C + 3)
    bias: np.ndarray  # (C',)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[1] < 3:
            raise ValueError(f"aggregator weight must be (C', C+3), got {self.weight.shape}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] - 3

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def w_feat(self) -> np.ndarray:
        return self.weight[:, : self.in_channels]

    @property
    def w_coord(self) -> np.ndarray:
        return self.weight[:, self.in_channels:]

    @classmethod
    def from_parts(cls, w_feat, w_coord, bias) -> "AggregatorWeights":
        return cls(np.concatenate([w_feat, w_coord], axis=1), bias)

    @classmethod
    def random(cls, c: int, c_out: int, rng: np.random.Generator) -> "AggregatorWeights":
        s = 1.0 / np.sqrt(c + 3)
        return cls(rng.uniform(-s, s, (c_out, c + 3)), rng.uniform(-s, s, c_out))


class MacCounter:
    """Multiply-accumulate tally shared by the instrumented aggregation paths."""

    def __init__(self):
        self.count = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        with self._lock:
            self.count += int(n)


def flop_count(mode: str, n: int, m: int, k: int, c: int, c_out: int) -> int:
    """Analytic MAC count of one aggregation layer over M grid points."""
    if min(n, m, k, c, c_out) < 0:
        raise ValueError("counts must be non-negative")
    if mode == "original":
        return m * k * (c + 3) * c_out
    if mode == "accelerated":
        return n * c * c_out + m * k * 3 * c_out
    raise ValueError(f"unknown aggregation mode {mode!r}")


def roi_grid_points_batch(rois: np.ndarray, g: int) -> np.ndarray:
    """(R, G^3, 3) sub-voxel centers, x fastest, rotated with each RoI's yaw."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 7)
    t = (np.arange(g) + 0.5) / g - 0.5
    zz, yy, xx = np.meshgrid(t, t, t, indexing="ij")
    unit = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)  # (G^3, 3)
    local = unit[None] * rois[:, None, 3:6]
    c, s = np.cos(rois[:, 6])[:, None], np.sin(rois[:, 6])[:, None]
    out = np.empty_like(local)
    out[..., 0] = c * local[..., 0] - s * local[..., 1] + rois[:, None, 0]
    out[..., 1] = s * local[..., 0] + c * local[..., 1] + rois[:, None, 1]
    out[..., 2] = local[..., 2] + rois[:, None, 2]
    return out


def roi_grid_points(roi, g: int) -> np.ndarray:
    arr = roi.to_array() if isinstance(roi, geom3d.Box3D) else np.asarray(roi)
    return roi_grid_points_batch(arr, g)[0]


def aggregate_original(rel, grouped_features, valid, weights: AggregatorWeights, counter: MacCounter | None = None):
    """Transform every grouped ``[feature; relcoord]`` row, then max over K.

    ``rel`` is (M, K, 3), ``grouped_features`` (M, K, C), ``valid`` (M, K).
    Padded slots and empty groups contribute zeros.
    """
    rel = np.asarray(rel, dtype=np.float64)
    feats = np.asarray(grouped_features, dtype=np.float64)
    if feats.shape[-1] != weights.in_channels:
        raise ValueError(f"feature width {feats.shape[-1]} != aggregator input width {weights.in_channels}")
    m, k, _ = feats.shape
    x = np.concatenate([feats, rel], axis=2)
    y = x @ weights.weight.T + weights.bias
    if counter is not None:
        counter.add(m * k * x.shape[2] * weights.out_channels)
    np.maximum(y, 0.0, out=y)
    y[~np.asarray(valid, dtype=bool)] = 0.0
    if k == 0:
        return np.zeros((m, weights.out_channels))
    return y.max(axis=1)


def pretransform(grid: SparseVoxelGrid, weights: AggregatorWeights, counter: MacCounter | None = None) -> np.ndarray:
    """Per-voxel W_F projection, computed once before any grouping."""
    if grid.num_channels != weights.in_channels and len(grid):
        raise ValueError(f"grid width {grid.num_channels} != aggregator input width {weights.in_channels}")
    if counter is not None:
        counter.add(len(grid) * weights.in_channels * weights.out_channels)
    if len(grid) == 0:
        return np.zeros((0, weights.out_channels))
    return np.asarray(grid.features, dtype=np.float64) @ weights.w_feat.T


def aggregate_accelerated(
    grid: SparseVoxelGrid,
    pretransformed: np.ndarray,
    rows,
    rel,
    weights: AggregatorWeights,
    counter: MacCounter | None = None,
):
    """Gather pre-projected voxel rows, add W_C * relcoord, ReLU, max over K."""
    pretransformed = np.asarray(pretransformed, dtype=np.float64)
    if pretransformed.shape != (len(grid), weights.out_channels):
        raise ValueError(
            f"pretransformed matrix is {pretransformed.shape}, grid needs ({len(grid)}, {weights.out_channels})"
        )
    rows = np.asarray(rows, dtype=np.int64)
    rel = np.asarray(rel, dtype=np.float64)
    m, k = rows.shape
    valid = rows >= 0
    if len(grid) == 0:
        gathered = np.zeros((m, k, weights.out_channels))
    else:
        gathered = pretransformed[np.where(valid, rows, 0)]
    y = gathered + rel @ weights.w_coord.T + weights.bias
    if counter is not None:
        counter.add(m * k * 3 * weights.out_channels)
    np.maximum(y, 0.0, out=y)
    y[~valid] = 0.0
    if k == 0:
        return np.zeros((m, weights.out_channels))
    return y.max(axis=1)


def group_neighbors(grid: SparseVoxelGrid, points: np.ndarray, thresholds, k: int):
    """Voxel-query every point; returns per threshold (rows, rel) with clamped points emptied."""
    groups = voxel_query_batch(grid, points, thresholds, k)
    centers = grid.centers()
    out = []
    for gn in groups:
        rows = np.where(gn.clamped[:, None], -1, gn.rows)
        valid = rows >= 0
        rel = np.zeros(rows.shape + (3,))
        if valid.any():
            rel[valid] = centers[rows[valid]] - np.broadcast_to(points[:, None, :], rows.shape + (3,))[valid]
        out.append((rows, rel))
    return out


def pool_points(
    grid: SparseVoxelGrid,
    points: np.ndarray,
    threshold: int,
    k: int,
    weights: AggregatorWeights,
    mode: str = "accelerated",
    counter: MacCounter | None = None,
    pretransformed: np.ndarray | None = None,
) -> np.ndarray:
    """One stage, one radius: (M, C') aggregated features for M grid points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    (rows, rel), = group_neighbors(grid, points, [threshold], k)
    if mode == "original":
        feats = np.zeros(rows.shape + (weights.in_channels,))
        valid = rows >= 0
        if valid.any():
            feats[valid] = grid.features[rows[valid]]
        return aggregate_original(rel, feats, valid, weights, counter)
    if mode == "accelerated":
        if pretransformed is None:
            pretransformed = pretransform(grid, weights, counter)
        return aggregate_accelerated(grid, pretransformed, rows, rel, weights, counter)
    raise ValueError(f"unknown aggregation mode {mode!r}")


@dataclass
class RoiFeatures:
    grid_features: np.ndarray  # (R, G^3, blocks * C')
    outside: np.ndarray  # (R,) bool: RoI has no grid point inside the volume range

    @property
    def flat(self) -> np.ndarray:
        return self.grid_features.reshape(len(self.grid_features), -1)

    def __len__(self) -> int:
        return len(self.grid_features)


def aggregator_weights(params: NetworkParams) -> dict:
    """{(stage, threshold): AggregatorWeights} for stages 3 and 4."""
    out = {}
    for stage in (3, 4):
        for thr in params.config.roi_thresholds:
            layer = params[f"agg_s{stage}_d{thr}"]
            out[(stage, thr)] = AggregatorWeights(layer.weight, layer.bias)
    return out


def voxel_roi_pool(
    stage_grids,
    rois,
    cfg: RoiPoolConfig,
    weights: dict,
    mode: str = "accelerated",
    threads: int = 1,
    counter: MacCounter | None = None,
) -> RoiFeatures:
    """Pool RoI features from the last two backbone stages.

    ``weights`` maps ``(stage, threshold)`` to :class:`AggregatorWeights`,
    with stages numbered 3 and 4.  Channel blocks are concatenated in
    (stage ascending, threshold ascending) order.
    """
    if mode not in ("original", "accelerated"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    grids = dict(zip((3, 4), stage_grids))
    rois = geom3d.boxes_to_array(rois) if not isinstance(rois, np.ndarray) else np.asarray(rois, np.float64).reshape(-1, 7)
    g3 = cfg.grid_size ** 3
    blocks = [(s, t) for s in (3, 4) for t in cfg.thresholds]
    c_out = cfg.out_channels
    r = len(rois)

    pre = {}
    if mode == "accelerated":
        for key in blocks:
            pre[key] = pretransform(grids[key[0]], weights[key], counter)

    def work(start: int):
        chunk = rois[start:start + ROI_CHUNK]
        pts = roi_grid_points_batch(chunk, cfg.grid_size).reshape(-1, 3)
        parts = []
        inside_any = np.zeros(len(chunk), dtype=bool)
        for stage in (3, 4):
            grid = grids[stage]
            groups = group_neighbors(grid, pts, cfg.thresholds, cfg.k)
            for thr, (rows, rel) in zip(cfg.thresholds, groups):
                w = weights[(stage, thr)]
                if mode == "original":
                    valid = rows >= 0
                    feats = np.zeros(rows.shape + (w.in_channels,))
                    if valid.any():
                        feats[valid] = grid.features[rows[valid]]
                    parts.append(aggregate_original(rel, feats, valid, w, counter))
                else:
                    parts.append(aggregate_accelerated(grid, pre[(stage, thr)], rows, rel, w, counter))
        cfg_vox = grids[3].config
        lo, hi = np.asarray(cfg_vox.range_min), np.asarray(cfg_vox.range_max)
        inb = np.all((pts >= lo) & (pts < hi), axis=1).reshape(len(chunk), g3)
        inside_any |= inb.any(axis=1)
        feats = np.concatenate(parts, axis=1).reshape(len(chunk), g3, len(blocks) * c_out)
        return feats, ~inside_any

    starts = list(range(0, r, ROI_CHUNK))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, starts))
    else:
        results = [work(s) for s in starts]
    if not results:
        return RoiFeatures(np.zeros((0, g3, len(blocks) * c_out)), np.zeros(0, dtype=bool))
    feats = np.concatenate([f for f, _ in results], axis=0)
    outside = np.concatenate([o for _, o in results])
    return RoiFeatures(feats, outside)


# ---------------------------------------------------------------------------
# detect head
# ---------------------------------------------------------------------------

@dataclass
class HeadParams:
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray
    reg_w: np.ndarray
    reg_b: np.ndarray

    @classmethod
    def from_network(cls, params: NetworkParams) -> "HeadParams":
        f = lambda n: np.asarray(params[n].weight, np.float64)  # noqa: E731
        b = lambda n: np.asarray(params[n].bias, np.float64)  # noqa: E731
        return cls(f("head_fc1"), b("head_fc1"), f("head_fc2"), b("head_fc2"),
                   f("head_cls"), b("head_cls"), f("head_reg"), b("head_reg"))

    @classmethod
    def zeros(cls, width: int, hidden: int = 256) -> "HeadParams":
        z = np.zeros
        return cls(z((hidden, width)), z(hidden), z((hidden, hidden)), z(hidden), z((1, hidden)), z(1), z((7, hidden)), z(7))


def detect_head_forward(features, head: HeadParams) -> tuple[np.ndarray, np.ndarray]:
    """Shared 2-layer MLP, then sigmoid confidence (R, 1) and residuals (R, 7)."""
    x = features.flat if isinstance(features, RoiFeatures) else np.asarray(features, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if x.shape[1] != head.fc1_w.shape[1]:
        raise ValueError(f"RoI feature width {x.shape[1]} != head input width {head.fc1_w.shape[1]}")
    h = np.maximum(x @ head.fc1_w.T + head.fc1_b, 0.0)
    h = np.maximum(h @ head.fc2_w.T + head.fc2_b, 0.0)
    conf = sigmoid(h @ head.cls_w.T + head.cls_b)
    resid = h @ head.reg_w.T + head.reg_b
    return conf.reshape(-1, 1), resid.reshape(-1, 7)
