import itertools

import numpy as np
import pytest

from vrk import vquery
from vrk.vquery import QuerySpec
from vrk.voxelizer import SparseVoxelGrid, VoxelizationConfig

UNIT = VoxelizationConfig(range_min=(0, 0, 0), range_max=(20.0, 20.0, 20.0), voxel_size=(1.0, 1.0, 1.0))


def grid_of(coords, c=1):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return SparseVoxelGrid(coords, np.zeros((len(coords), c)), 1, (20, 20, 20), UNIT)


def random_grid(seed, n=1000):
    rng = np.random.default_rng(seed)
    flat = rng.choice(8000, size=n, replace=False)
    return grid_of(np.stack(np.unravel_index(flat, (20, 20, 20)), axis=1)), rng


def test_manhattan():
    assert vquery.manhattan_distance((0, 0, 0), (0, 0, 0)) == 0
    assert vquery.manhattan_distance((2, 3, 1), (4, 1, 0)) == 5
    rng = np.random.default_rng(0)
    for a, b in rng.integers(-50, 50, size=(20, 2, 3)):
        assert vquery.manhattan_distance(a, b) == vquery.manhattan_distance(b, a)


def test_offset_table_order():
    t = vquery.offset_table(2)
    assert len(t) == 25  # 1 + 6 + 18
    d = np.abs(t).sum(axis=1)
    assert np.all(np.diff(d) >= 0)
    assert tuple(t[0]) == (0, 0, 0)


def test_single_voxel_threshold_zero():
    grid = grid_of([[4, 4, 4]])
    res = vquery.voxel_query(grid, (4.5, 4.5, 4.5), QuerySpec(0, 16))
    assert res.rows == [0] and res.distances == [0]


def test_threshold_excludes_far_voxel():
    grid = grid_of([[5, 5, 5], [6, 5, 5], [8, 5, 5]])
    res = vquery.voxel_query(grid, (5.5, 5.5, 5.5), QuerySpec(2, 16))
    assert res.coords == [(5, 5, 5), (6, 5, 5)]
    assert res.distances == [0, 1]


def test_early_stop_at_k():
    grid, rng = random_grid(1, 3000)
    for p in rng.uniform(0, 20, size=(30, 3)):
        res = vquery.voxel_query(grid, p, QuerySpec(4, 5))
        assert len(res) <= 5
        assert res.distances == sorted(res.distances)


def test_matches_linear_scan():
    for seed in range(5):
        grid, rng = random_grid(seed)
        for p in rng.uniform(-1, 21, size=(10, 3)):
            for spec in (QuerySpec(1, 4), QuerySpec(3, 16)):
                a = vquery.voxel_query(grid, p, spec)
                b = vquery.linear_scan_query(grid, p, spec)
                assert (a.rows, a.distances, a.clamped) == (b.rows, b.distances, b.clamped)


def test_out_of_range_query_is_clamped():
    grid = grid_of([[0, 0, 0]])
    res = vquery.voxel_query(grid, (-3.0, 0.5, 0.5), QuerySpec(1, 4))
    assert res.clamped and res.rows == [0]


def test_batch_matches_single():
    grid, rng = random_grid(7)
    pts = rng.uniform(0, 20, size=(40, 3))
    groups = vquery.voxel_query_batch(grid, pts, [1, 2, 4], 8)
    for thr, g in zip([1, 2, 4], groups):
        for m, p in enumerate(pts):
            single = vquery.voxel_query(grid, p, QuerySpec(thr, 8))
            rows = [r for r in g.rows[m] if r >= 0]
            assert rows == single.rows


def test_batch_empty_grid():
    grid = grid_of(np.zeros((0, 3)))
    (g,) = vquery.voxel_query_batch(grid, np.ones((3, 3)), [2], 4)
    assert g.rows.shape == (3, 4) and not g.valid.any()


def naive_ball(grid, q, radius, k):
    # second, independent brute force: plain double loop over the centers
    centers = grid.centers().tolist()
    hits = []
    for row, c in enumerate(centers):
        d2 = 0.0
        for a, b in zip(c, q):
            d2 += (a - b) ** 2
        if d2 <= radius * radius:
            hits.append((d2, row))
    hits.sort()
    return [row for _, row in hits[:k]]


def test_ball_query_examples():
    grid, rng = random_grid(2, 200)
    centre = grid.centers()[17]
    assert vquery.ball_query_oracle(grid, centre, 0.0, 16).rows == [17]
    assert sorted(vquery.ball_query_oracle(grid, (10, 10, 10), 100.0, 500).rows) == list(range(200))
    with pytest.raises(ValueError):
        vquery.ball_query_oracle(grid, centre, -1.0, 1)


def test_ball_query_matches_naive_loop():
    for seed in range(20):
        grid, rng = random_grid(100 + seed, 300)
        q = rng.uniform(0, 20, 3)
        r = float(rng.uniform(1, 4))
        assert vquery.ball_query_oracle(grid, q, r, 16).rows == naive_ball(grid, q.tolist(), r, 16)


def test_query_spec_validation():
    with pytest.raises(ValueError):
        QuerySpec(-1, 4)
    with pytest.raises(ValueError):
        QuerySpec(2, 0)


def test_bench_csv_format():
    rows = vquery.bench_query([500], QuerySpec(2, 4), repetitions=1000, seed=0)
    text = vquery.bench_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(vquery.BENCH_FIELDS)
    assert {r["method"] for r in rows} == {"voxel_query", "ball_query"}
    assert all(r["median_ns"] > 0 and r["p95_ns"] >= r["median_ns"] for r in rows)


def test_bench_grid_occupancy():
    g = vquery.bench_grid(2000, seed=0)
    occ = len(g) / float(np.prod(g.dims))
    assert occ == pytest.approx(0.03, rel=0.2)
    assert len({tuple(c) for c in g.coords}) == 2000
    assert list(itertools.islice(g.dims, 3)) == [g.dims[0]] * 3
