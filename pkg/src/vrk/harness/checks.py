"""Oracle-backed verification checks run by ``vrk selftest`` and the test suite.

Every check returns a :class:`CheckResult`; none of them raise on a
numerical failure.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from .. import geom3d, roipool, sparsenet, targets, vquery
from ..voxelizer import SparseVoxelGrid, VoxelizationConfig
from .config import PipelineConfig
from .evaluate import evaluate_ap
from .pipeline import expected_trace


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    budget: float | None = None

    @property
    def within_budget(self) -> bool:
        return self.budget is None or self.seconds < self.budget

    @property
    def ok(self) -> bool:
        return self.passed and self.within_budget

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        budget = f" (budget {self.budget:.0f}s)" if self.budget else ""
        return f"[{status}] {self.name}: {self.detail} [{self.seconds:.2f}s{budget}]"


def _timed(name: str, budget: float | None, fn) -> CheckResult:
    t0 = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # a crash is a failed check, reported not raised
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0, budget)


# ---------------------------------------------------------------------------
# 1. aggregator equivalence
# ---------------------------------------------------------------------------

def _random_grid(rng, n: int, c: int, side: int = 24) -> SparseVoxelGrid:
    flat = rng.choice(side ** 3, size=n, replace=False)
    coords = np.stack(np.unravel_index(flat, (side,) * 3), axis=1)
    cfg = VoxelizationConfig(range_min=(0.0, 0.0, 0.0), range_max=(side * 0.2,) * 3, voxel_size=(0.2, 0.2, 0.2))
    return SparseVoxelGrid(coords, rng.normal(size=(n, c)), 1, (side,) * 3, cfg)


def aggregator_case(seed: int, corrupt: bool = False) -> float:
    """Max relative deviation between the two aggregation paths for one random case."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 33))
    c = int(rng.choice([16, 64]))
    c_out = int(rng.choice([32, 64]))
    n, m = 300, 64
    grid = _random_grid(rng, n, c)
    w = roipool.AggregatorWeights.random(c, c_out, rng)
    rows = rng.integers(0, n, size=(m, k))
    rows[rng.random((m, k)) < 0.2] = -1  # padded slots
    rel = rng.normal(scale=0.5, size=(m, k, 3))
    valid = rows >= 0
    grouped = np.where(valid[..., None], grid.features[np.where(valid, rows, 0)], 0.0)
    ref = roipool.aggregate_original(rel, grouped, valid, w)
    w_acc = w
    if corrupt:
        bad = w.weight.copy()
        bad[0, -1] += 0.5
        w_acc = roipool.AggregatorWeights(bad, w.bias)
    pre = roipool.pretransform(grid, w_acc)
    out = roipool.aggregate_accelerated(grid, pre, rows, rel, w_acc)
    scale = max(float(np.max(np.abs(ref))), 1e-12)
    return float(np.max(np.abs(out - ref))) / scale


def check_aggregator_equivalence(cases: int = 100, corrupt: bool = False) -> CheckResult:
    def run():
        worst = max(aggregator_case(s, corrupt=corrupt) for s in range(cases))
        return worst < 1e-5, f"{cases} cases, max relative error {worst:.3e} (< 1e-5)"

    return _timed("1 aggregator equivalence", 10.0, run)


# ---------------------------------------------------------------------------
# 2. voxel query vs linear scan
# ---------------------------------------------------------------------------

def check_voxel_query_oracle(grids: int = 50) -> CheckResult:
    def run():
        mismatches = 0
        total = 0
        for seed in range(grids):
            rng = np.random.default_rng(1000 + seed)
            n = int(rng.integers(900, 1101))
            grid = _random_grid(rng, n, 1, side=20)
            centers = grid.centers()
            pts = np.concatenate(
                [
                    centers[rng.choice(n, 10, replace=False)] + rng.uniform(-0.09, 0.09, (10, 3)),
                    rng.uniform(0.0, 4.0, (10, 3)),
                ]
            )
            for p in pts:
                for thr in (0, 1, 2, 4):
                    for k in (1, 4, 16):
                        spec = vquery.QuerySpec(thr, k)
                        got = vquery.voxel_query(grid, p, spec)
                        exp = vquery.linear_scan_query(grid, p, spec)
                        total += 1
                        if got.rows != exp.rows or got.distances != exp.distances:
                            mismatches += 1
        return mismatches == 0, f"{total} queries over {grids} grids, {mismatches} mismatches"

    return _timed("2 voxel query == linear-scan oracle", 30.0, run)


# ---------------------------------------------------------------------------
# 3. query scaling
# ---------------------------------------------------------------------------

def check_query_scaling(repetitions: int = 1000) -> CheckResult:
    def run():
        rows = vquery.bench_query([10_000, 100_000], vquery.QuerySpec(4, 16), repetitions)
        med = {(r["n_voxels"], r["method"]): r["median_ns"] for r in rows}
        vq_ratio = med[(100_000, "voxel_query")] / med[(10_000, "voxel_query")]
        bq_ratio = med[(100_000, "ball_query")] / med[(10_000, "ball_query")]
        speedup = med[(100_000, "ball_query")] / med[(100_000, "voxel_query")]
        ok = (0.5 < vq_ratio < 2.0) and bq_ratio >= 5.0 and speedup >= 10.0
        return ok, (
            f"voxel_query x{vq_ratio:.2f} (<2), ball_query x{bq_ratio:.1f} (>=5), "
            f"speedup at 1e5 {speedup:.0f}x (>=10)"
        )

    return _timed("3 query scaling O(K) vs O(N)", 180.0, run)


# ---------------------------------------------------------------------------
# 4. FLOP model
# ---------------------------------------------------------------------------

def check_flop_model() -> CheckResult:
    def run():
        rng = np.random.default_rng(4)
        mismatches = []
        for c, c_out, k, thr in ((64, 32, 16, 2), (48, 32, 8, 4), (16, 64, 1, 1)):
            grid = _random_grid(rng, 500, c, side=16)
            pts = rng.uniform(0.0, 3.2, size=(37, 3))
            w = roipool.AggregatorWeights.random(c, c_out, rng)
            for mode in ("original", "accelerated"):
                counter = roipool.MacCounter()
                roipool.pool_points(grid, pts, thr, k, w, mode, counter)
                expect = roipool.flop_count(mode, len(grid), len(pts), k, c, c_out)
                if counter.count != expect:
                    mismatches.append((mode, c, counter.count, expect))
        orig = roipool.flop_count("original", 16000, 21600, 16, 64, 32)
        acc = roipool.flop_count("accelerated", 16000, 21600, 16, 64, 32)
        ratio = orig / acc
        ok = not mismatches and orig == 740_966_400 and acc == 65_945_600 and ratio >= 10
        return ok, f"counter mismatches {len(mismatches)}; reference point {orig:,} / {acc:,} = {ratio:.2f} (>=10)"

    return _timed("4 FLOP model", 10.0, run)


# ---------------------------------------------------------------------------
# 5. sparse conv vs dense brute force
# ---------------------------------------------------------------------------

def dense_conv3d_reference(dense: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Direct loop over output cells and kernel taps, zero padding 1."""
    nx, ny, nz, _ = dense.shape
    out_dims = tuple((d + stride - 1) // stride for d in (nx, ny, nz))
    out = np.zeros(out_dims + (weight.shape[0],))
    for ox in range(out_dims[0]):
        for oy in range(out_dims[1]):
            for oz in range(out_dims[2]):
                acc = np.array(bias, dtype=np.float64)
                for a in range(3):
                    x = ox * stride + a - 1
                    if not 0 <= x < nx:
                        continue
                    for b in range(3):
                        y = oy * stride + b - 1
                        if not 0 <= y < ny:
                            continue
                        for c in range(3):
                            z = oz * stride + c - 1
                            if 0 <= z < nz:
                                acc = acc + weight[:, :, a, b, c] @ dense[x, y, z]
                out[ox, oy, oz] = acc
    return out


def check_sparse_conv_oracle() -> CheckResult:
    def run():
        rng = np.random.default_rng(5)
        worst = 0.0
        cases = 0
        for side in (3, 5, 8, 16):
            dense = rng.normal(size=(side, side, side, 3))
            coords = np.stack(np.meshgrid(*(np.arange(side),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
            grid = SparseVoxelGrid(coords, dense.reshape(-1, 3), 1, (side,) * 3)
            for mode, stride in (("submanifold", 1), ("regular", 1), ("regular", 2)):
                w = rng.normal(size=(4, 3, 3, 3, 3))
                b = rng.normal(size=4)
                layer = sparsenet.ConvLayerParams("t", w, b, stride, mode)
                out = sparsenet.sparse_conv3d(grid, layer, relu=False)
                ref = dense_conv3d_reference(dense, w, b, stride)
                got = np.zeros_like(ref)
                got[tuple(out.coords.T)] = out.features
                if len(out) != int(np.prod(ref.shape[:3])):
                    return False, f"side {side} {mode}/{stride}: {len(out)} active outputs, expected {np.prod(ref.shape[:3])}"
                worst = max(worst, float(np.max(np.abs(got - ref))))
                cases += 1
        return worst < 1e-5, f"{cases} grids up to 16^3, max |diff| {worst:.2e} (< 1e-5)"

    return _timed("5 sparse conv == dense oracle", 30.0, run)


# ---------------------------------------------------------------------------
# 6. rotated IoU vs Monte Carlo
# ---------------------------------------------------------------------------

def _inside_bev(pts: np.ndarray, box: np.ndarray) -> np.ndarray:
    c, s = math.cos(box[6]), math.sin(box[6])
    dx, dy = pts[:, 0] - box[0], pts[:, 1] - box[1]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= 0.5 * box[3]) & (np.abs(v) <= 0.5 * box[4])


def monte_carlo_iou_bev(a, b, samples: int = 1_000_000, seed: int = 0) -> float:
    """Uniform samples over the bounding rectangle of both footprints."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    corners = np.concatenate([geom3d.bev_corners(a), geom3d.bev_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = np.random.default_rng(seed).uniform(lo, hi, size=(samples, 2))
    ia, ib = _inside_bev(pts, a), _inside_bev(pts, b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def monte_carlo_iou_3d(a, b, samples: int = 1_000_000, seed: int = 0) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    corners = np.concatenate([geom3d.bev_corners(a), geom3d.bev_corners(b)])
    zlo = min(a[2] - a[5] / 2, b[2] - b[5] / 2)
    zhi = max(a[2] + a[5] / 2, b[2] + b[5] / 2)
    lo = np.append(corners.min(axis=0), zlo)
    hi = np.append(corners.max(axis=0), zhi)
    pts = np.random.default_rng(seed).uniform(lo, hi, size=(samples, 3))
    ia = _inside_bev(pts, a) & (np.abs(pts[:, 2] - a[2]) <= a[5] / 2)
    ib = _inside_bev(pts, b) & (np.abs(pts[:, 2] - b[2]) <= b[5] / 2)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def random_box_pair(rng) -> tuple[np.ndarray, np.ndarray]:
    a = np.array([0.0, 0.0, 0.0, *rng.uniform(1.0, 5.0, 3), rng.uniform(-math.pi, math.pi)])
    b = np.array([*rng.uniform(-1.5, 1.5, 2), rng.uniform(-1.0, 1.0), *rng.uniform(1.0, 5.0, 3), rng.uniform(-math.pi, math.pi)])
    return a, b


def check_rotated_iou_oracle(pairs: int = 100, samples: int = 1_000_000) -> CheckResult:
    def run():
        rng = np.random.default_rng(6)
        worst = 0.0
        for n in range(pairs):
            a, b = random_box_pair(rng)
            worst = max(worst, abs(geom3d.iou_bev(a, b) - monte_carlo_iou_bev(a, b, samples, seed=n)))
        sq = np.array([0, 0, 0, 1, 1, 1, 0.0])
        rot = np.array([0, 0, 0, 1, 1, 1, math.pi / 4])
        quarter = geom3d.iou_bev(sq, rot)
        ok = worst < 2e-3 and abs(quarter - 0.7071) < 2e-3
        return ok, f"{pairs} pairs max |IoU - MC| {worst:.2e} (< 2e-3); pi/4 case {quarter:.5f} vs 0.7071"

    return _timed("6 rotated IoU == Monte-Carlo oracle", 120.0, run)


# ---------------------------------------------------------------------------
# 7. confidence target mapping
# ---------------------------------------------------------------------------

CONFIDENCE_TABLE = {0.0: 0.0, 0.2: 0.0, 0.25: 0.0, 0.5: 0.5, 0.75: 1.0, 0.8: 1.0, 1.0: 1.0}


def check_confidence_target() -> CheckResult:
    def run():
        cfg = targets.HeadLossConfig()
        wrong = [iou for iou, v in CONFIDENCE_TABLE.items() if targets.confidence_target(iou, cfg) != v]
        jump = 0.0
        for knot in (cfg.theta_l, cfg.theta_h):
            for eps in (1e-13, -1e-13):
                jump = max(jump, abs(targets.confidence_target(knot + eps, cfg) - targets.confidence_target(knot, cfg)))
        return not wrong and jump < 1e-12, f"table mismatches {wrong}; max jump at knots {jump:.1e} (< 1e-12)"

    return _timed("7 IoU -> confidence target", None, run)


# ---------------------------------------------------------------------------
# 8. loss fixtures
# ---------------------------------------------------------------------------

# Two anchors, alpha = 0.25, gamma = 2, huber delta = 1/9.
#   anchor 0: foreground, p = 0.8, residual error (0.05, 0, 0, 0, 0, 0, 0.2)
#   anchor 1: background, p = 0.3
# focal(0.8, 1) = -0.25 * 0.2^2 * ln 0.8 = 0.01 * 0.2231435513 = 0.002231435513
# focal(0.3, 0) = -0.75 * 0.3^2 * ln 0.7 = 0.0675 * 0.3566749439 = 0.024075558716
# huber: |0.05| <= 1/9 -> 0.5 * 0.0025 * 9 = 0.01125
#        |0.2|  >  1/9 -> 0.2 - 1/18      = 0.144444444444
# N_fg = 1: cls = 0.026306994229, reg = 0.155694444444
RPN_FIXTURE = dict(
    probs=[0.8, 0.3],
    labels=[1, 0],
    reg_targets=[[0.1, -0.2, 0.05, 0.0, 0.1, 0.0, 0.3], [0.0] * 7],
    residuals=[[0.15, -0.2, 0.05, 0.0, 0.1, 0.0, 0.5], [0.4, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4]],
    expected_cls=0.026306994229006536,
    expected_reg=0.15569444444444447,
)

# Three RoIs, theta_l = 0.25, theta_h = 0.75, theta_reg = 0.55, N_s = 3.
#   IoU (0.8, 0.5, 0.2) -> targets (1, 0.5, 0); confidences (0.9, 0.6, 0.1)
# BCE: -ln 0.9 = 0.105360515658
#      -(0.5 ln 0.6 + 0.5 ln 0.4) = 0.5 * (0.510825623766 + 0.916290731874) = 0.713558177820
#      -ln 0.9 = 0.105360515658
# cls = 0.924279209136 / 3 = 0.308093069712
# regression only RoI 0 (IoU 0.8 >= 0.55), error 0.1 on one component:
#      0.5 * 0.01 * 9 = 0.045 -> reg = 0.045 / 3 = 0.015
HEAD_FIXTURE = dict(
    confidences=[0.9, 0.6, 0.1],
    ious=[0.8, 0.5, 0.2],
    reg_targets=[[0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0] * 7, [0.0] * 7],
    residuals=[[0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], [1.0] * 7, [2.0] * 7],
    expected_cls=0.3080930697119085,
    expected_reg=0.015000000000000005,
)


def rpn_fixture_loss(fx=RPN_FIXTURE) -> targets.LossBreakdown:
    t = targets.RpnTargets(np.array(fx["labels"]), np.array(fx["reg_targets"], float), np.array([0, -1]))
    return targets.rpn_loss(fx["probs"], fx["residuals"], t)


def head_fixture_loss(fx=HEAD_FIXTURE) -> targets.LossBreakdown:
    return targets.head_loss(fx["confidences"], fx["residuals"], fx["ious"], fx["reg_targets"])


def check_loss_fixtures() -> CheckResult:
    def run():
        rpn = rpn_fixture_loss()
        head = head_fixture_loss()
        errs = [
            abs(rpn.cls - RPN_FIXTURE["expected_cls"]),
            abs(rpn.reg - RPN_FIXTURE["expected_reg"]),
            abs(head.cls - HEAD_FIXTURE["expected_cls"]),
            abs(head.reg - HEAD_FIXTURE["expected_reg"]),
        ]
        # zero-loss fixtures: perfect predictions on the same layouts
        tz = targets.RpnTargets(np.array([1, 0]), np.array(RPN_FIXTURE["reg_targets"], float), np.array([0, -1]))
        rpn0 = targets.rpn_loss([1.0, 0.0], [RPN_FIXTURE["reg_targets"][0], [9.0] * 7], tz).total
        head0 = targets.head_loss([1.0, 0.0, 1.0], HEAD_FIXTURE["reg_targets"], [0.9, 0.1, 0.8],
                                  HEAD_FIXTURE["reg_targets"]).total
        ok = max(errs) < 1e-9 and rpn0 < 1e-9 and abs(head0) < 1e-9
        return ok, f"max fixture error {max(errs):.1e} (< 1e-9); zero fixtures {rpn0:.1e}, {abs(head0):.1e}"

    return _timed("8 loss fixtures", None, run)


# ---------------------------------------------------------------------------
# 9. AP evaluator
# ---------------------------------------------------------------------------

AP_FIXTURE_EXPECTED = 0.2727  # 1 gt, 2 dets (higher-scored one false): hand oracle value


def ap_fixture():
    gt = geom3d.Box3D(10.0, 0.0, -1.0, 3.9, 1.6, 1.56, 0.0)
    false = geom3d.ScoredBox(geom3d.Box3D(30.0, 5.0, -1.0, 3.9, 1.6, 1.56, 0.0), 0.9)
    true = geom3d.ScoredBox(gt, 0.6)
    return [false, true], [gt]


def check_ap_evaluator() -> CheckResult:
    def run():
        rng = np.random.default_rng(9)
        gts = [geom3d.Box3D(float(10 * i), 0.0, -1.0, 3.9, 1.6, 1.56, float(rng.uniform(-3, 3))) for i in range(5)]
        perfect = [geom3d.ScoredBox(g, float(s)) for g, s in zip(gts, rng.uniform(0, 1, 5))]
        p11 = evaluate_ap(perfect, gts, 0.7, "r11").ap
        p40 = evaluate_ap(perfect, gts, 0.7, "r40").ap
        z11 = evaluate_ap([], gts, 0.7, "r11").ap
        z40 = evaluate_ap([], gts, 0.7, "r40").ap
        dets, fgts = ap_fixture()
        fixture = evaluate_ap(dets, fgts, 0.7, "r11").ap
        ok = p11 == 1.0 and p40 == 1.0 and z11 == 0.0 and z40 == 0.0 and abs(fixture - AP_FIXTURE_EXPECTED) < 1e-4
        return ok, (
            f"perfect {p11:.4f}/{p40:.4f}, empty {z11:.4f}/{z40:.4f}, "
            f"1-gt/2-det r11 fixture {fixture:.4f} vs expected {AP_FIXTURE_EXPECTED}"
        )

    return _timed("9 AP evaluator", None, run)


# ---------------------------------------------------------------------------
# 10. end-to-end determinism
# ---------------------------------------------------------------------------

def check_end_to_end(seed: int = 0, threads: int = 4) -> CheckResult:
    from . import cli  # cli imports this module

    def run():
        with tempfile.TemporaryDirectory() as tmp:
            cloud = os.path.join(tmp, "scene.bin")
            gts = os.path.join(tmp, "scene_gt.txt")
            weights = os.path.join(tmp, "weights")
            if cli.main(["synth", "--seed", str(seed), "--objects", "8", "--out", f"{cloud},{gts}"]) != 0:
                return False, "synth failed"
            if cli.main(["weights", "init", "--seed", str(seed), "--out", weights]) != 0:
                return False, "weights init failed"
            outputs = []
            traces = []
            for n, t in enumerate((1, 1, threads)):
                out = os.path.join(tmp, f"dets{n}.txt")
                trace = os.path.join(tmp, f"trace{n}.json")
                rc = cli.main(["detect", "--input", cloud, "--weights", weights, "--out", out,
                               "--threads", str(t), "--trace", trace])
                if rc != 0:
                    return False, f"detect run {n} exited {rc}"
                with open(out, "rb") as fh:
                    outputs.append(fh.read())
                with open(trace) as fh:
                    traces.append(json.load(fh))
        same = outputs[0] == outputs[1] == outputs[2]
        exp = expected_trace(PipelineConfig())
        tr = traces[0]
        shapes_ok = (
            [(s["stride"], s["channels"]) for s in tr["stages"]] == [(1, 16), (2, 32), (4, 48), (8, 64)]
            and [s["dims"] for s in tr["stages"]] == [s["dims"] for s in exp["stages"]]
            and tr["bev"] == exp["bev"]
            and tr["fused"] == exp["fused"]
        )
        n_dets = outputs[0].count(b"\n")
        return same and shapes_ok and n_dets <= 100, (
            f"byte-identical across 2 runs + {threads} threads: {same}; shape trace ok: {shapes_ok}; "
            f"{n_dets} detections; fused {tr['fused']}"
        )

    return _timed("10 end-to-end determinism", 60.0, run)


ALL_CHECKS = [
    check_aggregator_equivalence,
    check_voxel_query_oracle,
    check_query_scaling,
    check_flop_model,
    check_sparse_conv_oracle,
    check_rotated_iou_oracle,
    check_confidence_target,
    check_loss_fixtures,
    check_ap_evaluator,
    check_end_to_end,
]


def run_all(verbose_print=print) -> list[CheckResult]:
    results = []
    for fn in ALL_CHECKS:
        res = fn()
        verbose_print(res.line())
        results.append(res)
    return results
