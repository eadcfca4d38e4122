"""Point cloud voxelization and the sparse voxel grid container."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# 21 bits per axis -> exact 63-bit packed keys for dims up to 2**21
KEY_BITS = 21
KEY_MAX = 1 << KEY_BITS


@dataclass(frozen=True)
class VoxelizationConfig:
    range_min: tuple = (0.0, -40.0, -3.0)
    range_max: tuple = (70.4, 40.0, 1.0)
    voxel_size: tuple = (0.05, 0.05, 0.1)
    max_points_per_voxel: int = 5
    max_voxels: int = 40000

    def __post_init__(self):
        for lo, hi, sz in zip(self.range_min, self.range_max, self.voxel_size):
            if not hi > lo:
                raise ValueError(f"range_max must exceed range_min ({lo} .. {hi})")
            if not sz > 0:
                raise ValueError(f"voxel size must be positive, got {sz}")
        if min(self.grid_dims) < 1:
            raise ValueError(f"grid dims must be >= 1, got {self.grid_dims}")
        if self.max_points_per_voxel < 1 or self.max_voxels < 0:
            raise ValueError("voxel caps must be positive")

    @property
    def grid_dims(self) -> tuple:
        dims = []
        for lo, hi, sz in zip(self.range_min, self.range_max, self.voxel_size):
            q = (hi - lo) / sz
            # 70.4 / 0.05 is 1407.9999999999998 in binary floating point
            r = round(q)
            dims.append(int(r) if abs(q - r) < 1e-6 else int(math.floor(q)))
        return tuple(dims)

    def dims_at(self, stride: int) -> tuple:
        dims = self.grid_dims
        s = 1
        while s < stride:
            dims = tuple((d + 1) // 2 for d in dims)
            s *= 2
        if s != stride:
            raise ValueError(f"stride must be a power of two, got {stride}")
        return dims

    def to_dict(self) -> dict:
        return {
            "range_min": list(self.range_min),
            "range_max": list(self.range_max),
            "voxel_size": list(self.voxel_size),
            "max_points_per_voxel": self.max_points_per_voxel,
            "max_voxels": self.max_voxels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelizationConfig":
        kw = dict(d)
        for k in ("range_min", "range_max", "voxel_size"):
            if k in kw:
                kw[k] = tuple(float(v) for v in kw[k])
        return cls(**kw)


KITTI = VoxelizationConfig()
WAYMO = VoxelizationConfig(
    range_min=(-75.2, -75.2, -2.0),
    range_max=(75.2, 75.2, 4.0),
    voxel_size=(0.1, 0.1, 0.15),
    max_voxels=150000,
)
PRESETS = {"kitti": KITTI, "waymo": WAYMO}


def pack_keys(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return (c[:, 0] << (2 * KEY_BITS)) | (c[:, 1] << KEY_BITS) | c[:, 2]


def pack_key(i: int, j: int, k: int) -> int:
    return (i << (2 * KEY_BITS)) | (j << KEY_BITS) | k


@dataclass(eq=False)
class SparseVoxelGrid:
    """Non-empty voxels of one feature volume.

    ``coords`` holds (i, j, k) indices at ``stride`` (x, y, z order) and
    ``features`` the matching rows.  Lookups go through packed 64-bit keys.
    """

    coords: np.ndarray
    features: np.ndarray
    stride: int
    dims: tuple
    config: VoxelizationConfig = field(default=KITTI)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.int64).reshape(-1, 3))
        feats = np.asarray(self.features)
        if feats.ndim == 1:
            feats = feats.reshape(len(self.coords), -1)
        self.features = feats
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.features) != len(self.coords):
            raise ValueError(f"{len(self.coords)} coords but {len(self.features)} feature rows")
        if max(self.dims) > KEY_MAX:
            raise ValueError(f"dims {self.dims} exceed the {KEY_BITS}-bit key range")
        if len(self.coords):
            if self.coords.min() < 0 or np.any(self.coords.max(axis=0) >= np.asarray(self.dims)):
                raise ValueError("voxel coordinate outside grid dims")
            if len(np.unique(self.keys)) != len(self.keys):
                raise ValueError("duplicate voxel coordinates")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    @cached_property
    def keys(self) -> np.ndarray:
        return pack_keys(self.coords)

    @cached_property
    def _sorted(self):
        order = np.argsort(self.keys, kind="stable")
        return self.keys[order], order

    @cached_property
    def index(self) -> dict:
        """Exact packed-key -> row map."""
        return dict(zip(self.keys.tolist(), range(len(self.keys))))

    def row_of(self, coord) -> int | None:
        i, j, k = (int(v) for v in coord)
        if not (0 <= i < self.dims[0] and 0 <= j < self.dims[1] and 0 <= k < self.dims[2]):
            return None
        return self.index.get(pack_key(i, j, k))

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Vectorized row lookup; -1 for empty or out-of-dims cells."""
        c = np.asarray(coords, dtype=np.int64)
        shape = c.shape[:-1]
        c = c.reshape(-1, 3)
        rows = np.full(len(c), -1, dtype=np.int64)
        if len(self.coords) == 0 or len(c) == 0:
            return rows.reshape(shape)
        inb = np.all((c >= 0) & (c < np.asarray(self.dims)), axis=1)
        keys = pack_keys(c[inb])
        skeys, order = self._sorted
        pos = np.searchsorted(skeys, keys)
        pos = np.minimum(pos, len(skeys) - 1)
        hit = skeys[pos] == keys
        found = np.where(hit, order[pos], -1)
        rows[inb] = found
        return rows.reshape(shape)

    def centers(self) -> np.ndarray:
        return voxel_centers(self.coords, self.config, self.stride)

    def to_dict(self) -> dict:
        return {
            "stride": self.stride,
            "dims": list(self.dims),
            "coords": self.coords.tolist(),
            "features": np.asarray(self.features, dtype=np.float64).tolist(),
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SparseVoxelGrid":
        cfg = VoxelizationConfig.from_dict(d["config"]) if "config" in d else KITTI
        coords = np.asarray(d["coords"], dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(d["features"], dtype=np.float64)
        if feats.size == 0:
            feats = feats.reshape(len(coords), 0)
        return cls(coords, feats, int(d["stride"]), tuple(d["dims"]), cfg)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SparseVoxelGrid":
        return cls.from_dict(json.loads(text))


def empty_grid(cfg: VoxelizationConfig, stride: int, channels: int) -> SparseVoxelGrid:
    return SparseVoxelGrid(np.zeros((0, 3), np.int64), np.zeros((0, channels)), stride, cfg.dims_at(stride), cfg)


def voxelize(cloud: np.ndarray, cfg: VoxelizationConfig = KITTI) -> SparseVoxelGrid:
    """Bucket points into stride-1 voxels holding the mean (x, y, z, intensity).

    Voxels keep first-come order; the per-voxel point cap and the voxel cap
    are both applied in input order.
    """
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite values")
    lo = np.asarray(cfg.range_min)
    hi = np.asarray(cfg.range_max)
    size = np.asarray(cfg.voxel_size)
    dims = np.asarray(cfg.grid_dims)
    inside = np.all((pts[:, :3] >= lo) & (pts[:, :3] < hi), axis=1)
    pts = pts[inside]
    idx = np.floor((pts[:, :3] - lo) / size).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < dims), axis=1)
    pts, idx = pts[ok], idx[ok]
    if len(pts) == 0:
        return empty_grid(cfg, 1, 4)

    keys = pack_keys(idx)
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    # voxel ids in first-come order
    appearance = np.argsort(first, kind="stable")
    rank = np.empty_like(appearance)
    rank[appearance] = np.arange(len(appearance))
    vid = rank[inverse]
    keep_vox = vid < cfg.max_voxels

    # position of each point within its voxel, in input order
    order = np.argsort(vid, kind="stable")
    sorted_vid = vid[order]
    starts = np.searchsorted(sorted_vid, sorted_vid, side="left")
    slot = np.empty_like(vid)
    slot[order] = np.arange(len(vid)) - starts
    use = keep_vox & (slot < cfg.max_points_per_voxel)

    n_vox = int(min(len(uniq), cfg.max_voxels))
    sums = np.zeros((n_vox, 4))
    counts = np.zeros(n_vox)
    np.add.at(sums, vid[use], pts[use])
    np.add.at(counts, vid[use], 1.0)
    feats = sums / counts[:, None]
    coords = idx[first[appearance[:n_vox]]]
    return SparseVoxelGrid(coords, feats, 1, cfg.grid_dims, cfg)


def voxel_centers(coords: np.ndarray, cfg: VoxelizationConfig, stride: int = 1) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    lo = np.asarray(cfg.range_min)
    size = np.asarray(cfg.voxel_size) * stride
    return lo + (c + 0.5) * size


def voxel_center(coord, cfg: VoxelizationConfig, stride: int = 1) -> tuple:
    dims = cfg.dims_at(stride)
    c = tuple(int(v) for v in coord)
    if any(v < 0 or v >= d for v, d in zip(c, dims)):
        raise ValueError(f"coord {c} outside grid dims {dims} at stride {stride}")
    return tuple(float(v) for v in voxel_centers(np.array(c), cfg, stride)[0])


def to_bev(grid: SparseVoxelGrid) -> np.ndarray:
    """Dense (nx, ny, C * nz) map; channel index = k * C + c."""
    nx, ny, nz = grid.dims
    c = grid.num_channels
    bev = np.zeros((nx, ny, nz, c), dtype=grid.features.dtype if len(grid) else np.float64)
    if len(grid):
        i, j, k = grid.coords.T
        bev[i, j, k] = grid.features
    return bev.reshape(nx, ny, nz * c)
