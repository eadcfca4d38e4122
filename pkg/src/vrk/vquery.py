"""Manhattan-distance voxel query and the brute-force ball query it replaces."""
from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .voxelizer import KEY_BITS, SparseVoxelGrid, VoxelizationConfig, pack_key


@dataclass(frozen=True)
class QuerySpec:
    threshold: int = 2
    k: int = 16

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.k < 1:
            raise ValueError("K must be >= 1")


@dataclass
class NeighborSet:
    rows: list
    coords: list
    distances: list
    clamped: bool = False

    def __len__(self) -> int:
        return len(self.rows)


def manhattan_distance(a, b) -> int:
    return abs(int(a[0]) - int(b[0])) + abs(int(a[1]) - int(b[1])) + abs(int(a[2]) - int(b[2]))


@lru_cache(maxsize=None)
def offset_table(threshold: int) -> np.ndarray:
    """All offsets with L1 norm <= threshold, ordered by (distance, di, dj, dk)."""
    r = range(-threshold, threshold + 1)
    offs = [o for o in itertools.product(r, r, r) if abs(o[0]) + abs(o[1]) + abs(o[2]) <= threshold]
    offs.sort(key=lambda o: (abs(o[0]) + abs(o[1]) + abs(o[2]), o))
    arr = np.array(offs, dtype=np.int64).reshape(-1, 3)
    arr.setflags(write=False)
    return arr


@lru_cache(maxsize=None)
def _offset_list(threshold: int) -> tuple:
    # packed-key deltas; valid because (i+di)<<42 == (i<<42) + (di<<42) for in-bounds results
    return tuple(
        (int(di), int(dj), int(dk), int(abs(di) + abs(dj) + abs(dk)), (int(di) << 2 * KEY_BITS) + (int(dj) << KEY_BITS) + int(dk))
        for di, dj, dk in offset_table(threshold)
    )


def quantize(grid: SparseVoxelGrid, point) -> tuple[tuple, bool]:
    """Voxel coordinate of a metric point at the grid's stride, clamped into dims."""
    cfg = grid.config
    coord = []
    clamped = False
    for axis in range(3):
        size = cfg.voxel_size[axis] * grid.stride
        v = int(math.floor((float(point[axis]) - cfg.range_min[axis]) / size))
        hi = grid.dims[axis] - 1
        if v < 0 or v > hi:
            clamped = True
            v = min(max(v, 0), hi)
        coord.append(v)
    return tuple(coord), clamped


def quantize_many(grid: SparseVoxelGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cfg = grid.config
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    size = np.asarray(cfg.voxel_size) * grid.stride
    q = np.floor((pts - np.asarray(cfg.range_min)) / size).astype(np.int64)
    hi = np.asarray(grid.dims) - 1
    clamped = np.any((q < 0) | (q > hi), axis=1)
    return np.clip(q, 0, hi), clamped


def voxel_query(grid: SparseVoxelGrid, query_point, spec: QuerySpec) -> NeighborSet:
    """Up to K occupied voxels within Manhattan ``spec.threshold`` of the query.

    Enumerates index offsets shell by shell and stops once K are found, so
    the cost does not depend on the number of voxels in the grid.
    """
    (qi, qj, qk), clamped = quantize(grid, query_point)
    nx, ny, nz = grid.dims
    index = grid.index
    base = pack_key(qi, qj, qk)
    rows, coords, dists = [], [], []
    k = spec.k
    for di, dj, dk, d, dkey in _offset_list(spec.threshold):
        i, j, kk = qi + di, qj + dj, qk + dk
        if i < 0 or j < 0 or kk < 0 or i >= nx or j >= ny or kk >= nz:
            continue
        row = index.get(base + dkey)
        if row is not None:
            rows.append(row)
            coords.append((i, j, kk))
            dists.append(d)
            if len(rows) == k:
                break
    return NeighborSet(rows, coords, dists, clamped)


def linear_scan_query(grid: SparseVoxelGrid, query_point, spec: QuerySpec) -> NeighborSet:
    """O(N) reference: scan every voxel, sort by (distance, offset), truncate at K."""
    q, clamped = quantize(grid, query_point)
    found = []
    for row, c in enumerate(grid.coords.tolist()):
        d = manhattan_distance(c, q)
        if d <= spec.threshold:
            found.append((d, (c[0] - q[0], c[1] - q[1], c[2] - q[2]), row, tuple(c)))
    found.sort()
    found = found[: spec.k]
    return NeighborSet([f[2] for f in found], [f[3] for f in found], [f[0] for f in found], clamped)


def ball_query_oracle(grid: SparseVoxelGrid, query_point, radius: float, k: int) -> NeighborSet:
    """Brute-force Euclidean scan over all N voxel centers."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    centers = grid.centers()
    q = np.asarray(query_point, dtype=np.float64)
    d2 = np.sum((centers - q) ** 2, axis=1)
    inside = np.nonzero(d2 <= radius * radius)[0]
    order = inside[np.lexsort((inside, d2[inside]))][:k]
    return NeighborSet(order.tolist(), [tuple(c) for c in grid.coords[order].tolist()], np.sqrt(d2[order]).tolist())


@dataclass
class GroupedNeighbors:
    """Padded neighbor rows per query point: ``rows`` (M, K) with -1 padding."""

    rows: np.ndarray
    distances: np.ndarray
    clamped: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.rows >= 0


def voxel_query_batch(grid: SparseVoxelGrid, points: np.ndarray, thresholds, k: int) -> list[GroupedNeighbors]:
    """Vectorized voxel query for many points and several thresholds at once.

    One offset enumeration up to the largest threshold is shared; each
    threshold takes the first K hits among offsets within its shell, which
    is exactly what :func:`voxel_query` returns.
    """
    thresholds = list(thresholds)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(pts)
    q, clamped = quantize_many(grid, pts)
    table = offset_table(max(thresholds))
    shell = np.abs(table).sum(axis=1)
    out = []
    if m == 0 or len(grid) == 0:
        for _ in thresholds:
            out.append(GroupedNeighbors(np.full((m, k), -1, np.int64), np.zeros((m, k), np.int64), clamped))
        return out
    cand = grid.lookup(q[:, None, :] + table[None, :, :])  # (M, T)
    for thr in thresholds:
        width = int(np.searchsorted(shell, thr, side="right"))
        sub = cand[:, :width]
        hit = sub >= 0
        rank = np.cumsum(hit, axis=1) - 1
        take = hit & (rank < k)
        rows = np.full((m, k), -1, np.int64)
        dist = np.zeros((m, k), np.int64)
        mi, ti = np.nonzero(take)
        rows[mi, rank[mi, ti]] = sub[mi, ti]
        dist[mi, rank[mi, ti]] = shell[ti]
        out.append(GroupedNeighbors(rows, dist, clamped))
    return out


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

BENCH_OCCUPANCY = 0.03


def bench_grid(n_voxels: int, seed: int = 0, occupancy: float = BENCH_OCCUPANCY) -> SparseVoxelGrid:
    """Random cubic grid with ``n_voxels`` occupied cells at fixed occupancy."""
    side = max(1, int(math.ceil((n_voxels / occupancy) ** (1.0 / 3.0))))
    rng = np.random.default_rng(seed)
    flat = rng.choice(side ** 3, size=n_voxels, replace=False)
    coords = np.stack(np.unravel_index(flat, (side, side, side)), axis=1)
    cfg = VoxelizationConfig(range_min=(0.0, 0.0, 0.0), range_max=(float(side),) * 3, voxel_size=(1.0, 1.0, 1.0))
    feats = np.zeros((n_voxels, 1))
    return SparseVoxelGrid(coords, feats, 1, (side, side, side), cfg)


def _time_queries(fn, points) -> np.ndarray:
    times = np.empty(len(points), dtype=np.int64)
    clock = time.perf_counter_ns
    for n, p in enumerate(points):
        t0 = clock()
        fn(p)
        times[n] = clock() - t0
    return times


def bench_query(n_sweep, spec: QuerySpec = QuerySpec(4, 16), repetitions: int = 1000, seed: int = 0) -> list[dict]:
    """Median / p95 per-query latency of voxel_query vs ball_query_oracle.

    Grids keep a fixed occupancy as N grows, so local neighborhoods look
    alike and only the total voxel count changes.
    """
    repetitions = max(int(repetitions), 1000)
    rows = []
    for n in n_sweep:
        if n < 1:
            raise ValueError("sweep values must be >= 1")
        grid = bench_grid(int(n), seed)
        _ = grid.index  # build the hash outside the timed region
        rng = np.random.default_rng(seed + 1)
        pts = rng.uniform(0.0, grid.dims[0], size=(repetitions, 3))
        radius = float(spec.threshold)
        vq = _time_queries(lambda p: voxel_query(grid, p, spec), pts)
        bq = _time_queries(lambda p: ball_query_oracle(grid, p, radius, spec.k), pts)
        for method, t in (("voxel_query", vq), ("ball_query", bq)):
            rows.append(
                dict(
                    n_voxels=int(n),
                    method=method,
                    k=spec.k,
                    threshold_or_radius=spec.threshold if method == "voxel_query" else radius,
                    median_ns=int(np.median(t)),
                    p95_ns=int(np.percentile(t, 95)),
                )
            )
    return rows


BENCH_FIELDS = ["n_voxels", "method", "k", "threshold_or_radius", "median_ns", "p95_ns"]


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
