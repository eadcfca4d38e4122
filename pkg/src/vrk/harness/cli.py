"""``vrk`` command line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .. import roipool, sparsenet, targets, vquery
from ..geom3d import ScoredBox, read_boxes_text, write_boxes_text
from ..voxelizer import voxelize
from . import checks
from .config import dump_config, load_config
from .evaluate import EvaluationError, evaluate_ap
from .io import read_cloud, write_bin, write_detections
from .pipeline import PipelineError, analytic_pool_macs, pipeline_forward
from .synth import synth_scene

log = logging.getLogger("vrk")


def cmd_voxelize(args) -> int:
    cfg = load_config(args.config)
    grid = voxelize(read_cloud(args.input), cfg.voxelization)
    with open(args.out, "w") as fh:
        fh.write(grid.to_json())
    log.info("%d voxels, dims %s", len(grid), grid.dims)
    return 0


def cmd_detect(args) -> int:
    cfg = load_config(args.config)
    if args.score:
        from dataclasses import replace

        cfg = replace(cfg, post=replace(cfg.post, score=args.score))
    params = sparsenet.load_params(args.weights)
    cloud = read_cloud(args.input)
    result = pipeline_forward(cloud, params, cfg, agg=args.agg, threads=args.threads, count_macs=args.flops)
    write_detections(args.out, result.detections)
    if args.trace:
        with open(args.trace, "w") as fh:
            json.dump(result.trace, fh, indent=1)
    if args.flops:
        # stage grids are recomputed only for their sizes; the forward pass above did the counting
        stages = sparsenet.backbone3d_forward(voxelize(cloud, cfg.voxelization), params)[2:]
        r = len(result.proposals)
        report = {
            "agg": args.agg,
            "rois": r,
            "instrumented": result.macs,
            "analytic": analytic_pool_macs(stages, r, cfg.roi_pool, args.agg),
            "analytic_original": analytic_pool_macs(stages, r, cfg.roi_pool, "original"),
            "analytic_accelerated": analytic_pool_macs(stages, r, cfg.roi_pool, "accelerated"),
        }
        print(json.dumps(report))
    return 0


def cmd_weights_init(args) -> int:
    cfg = load_config(args.config)
    sparsenet.save_params(sparsenet.init_params(args.seed, cfg.network), args.out)
    return 0


def cmd_bench_query(args) -> int:
    ns = [int(float(v)) for v in args.n.split(",")]
    rows = vquery.bench_query(ns, vquery.QuerySpec(args.threshold, args.k), args.reps, args.seed)
    sys.stdout.write(vquery.bench_csv(rows))
    return 0


def cmd_bench_agg(args) -> int:
    import time

    print("case,k,c,c_out,max_rel_err,original_ns,accelerated_ns")
    worst = 0.0
    for case in range(args.cases):
        seed = args.seed + case
        rng = np.random.default_rng(seed)
        k, c, c_out = int(rng.integers(1, 33)), int(rng.choice([16, 64])), int(rng.choice([32, 64]))
        grid = checks._random_grid(rng, 2000, c)
        pts = rng.uniform(0.0, 4.8, size=(216, 3))
        w = roipool.AggregatorWeights.random(c, c_out, rng)
        t0 = time.perf_counter_ns()
        ref = roipool.pool_points(grid, pts, 4, k, w, "original")
        t1 = time.perf_counter_ns()
        acc = roipool.pool_points(grid, pts, 4, k, w, "accelerated")
        t2 = time.perf_counter_ns()
        err = float(np.max(np.abs(acc - ref))) / max(float(np.max(np.abs(ref))), 1e-12)
        worst = max(worst, err)
        print(f"{case},{k},{c},{c_out},{err:.3e},{t1 - t0},{t2 - t1}")
    return 0 if worst < 1e-5 else 1


def cmd_eval(args) -> int:
    # unscored boxes in a detection file count as score 1
    dets = [d if isinstance(d, ScoredBox) else ScoredBox(d, 1.0) for d in read_boxes_text(args.dets)]
    gts = read_boxes_text(args.gts)
    gts = [g.box if hasattr(g, "box") else g for g in gts]
    try:
        res = evaluate_ap(dets, gts, args.iou, args.mode, args.kind)
    except EvaluationError as exc:
        print(json.dumps({"error": str(exc)}))
        return 2
    print(json.dumps(res.to_dict()))
    return 0


def cmd_synth(args) -> int:
    parts = args.out.split(",")
    if len(parts) != 2:
        raise SystemExit("--out expects <points.bin>,<boxes.txt>")
    cfg = load_config(args.config)
    scene = synth_scene(args.seed, args.objects, cfg.voxelization)
    write_bin(parts[0], scene.points)
    write_boxes_text(parts[1], scene.boxes)
    if scene.placement_shortfall:
        log.warning("placed %d of %d objects", len(scene.boxes), args.objects)
    log.info("%d points, occupancy %.5f", len(scene.points), scene.occupancy)
    return 0


def cmd_losses_eval(args) -> int:
    with open(args.bundle) as fh:
        bundle = json.load(fh)
    kind = bundle.get("kind")
    cfg = bundle.get("config", {})
    if kind == "rpn":
        rcfg = targets.RpnLossConfig(**cfg)
        labels = np.asarray(bundle["labels"], dtype=np.int64)
        t = targets.RpnTargets(labels, np.asarray(bundle["reg_targets"], float), np.full(len(labels), -1))
        res = targets.rpn_loss(bundle["probs"], bundle["residuals"], t, rcfg)
    elif kind == "head":
        delta = cfg.pop("huber_delta", 1.0 / 9.0)
        hcfg = targets.HeadLossConfig(**cfg)
        res = targets.head_loss(bundle["confidences"], bundle["residuals"], bundle["ious"], bundle["reg_targets"],
                                hcfg, delta)
    else:
        raise SystemExit(f"bundle kind must be 'rpn' or 'head', got {kind!r}")
    print(json.dumps(res.to_dict()))
    return 0


def cmd_config(args) -> int:
    print(dump_config(load_config(args.config)))
    return 0


def cmd_selftest(args) -> int:
    print("vrk selftest")
    results = checks.run_all()
    passed = sum(r.ok for r in results)
    total_s = sum(r.seconds for r in results)
    print(f"{passed}/{len(results)} checks passed in {total_s:.1f}s")
    return 0 if passed == len(results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vrk", description="Voxel-based two-stage 3D detector tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("voxelize", help="voxelize a point cloud into a sparse grid JSON")
    s.add_argument("--input", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("detect", help="run the full detector")
    s.add_argument("--input", required=True)
    s.add_argument("--weights", required=True)
    s.add_argument("--config")
    s.add_argument("--agg", choices=["original", "accelerated"], default="accelerated")
    s.add_argument("--flops", action="store_true", help="print analytic and instrumented MAC counts")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--score", choices=["confidence", "combined"])
    s.add_argument("--trace", help="write the stage shape trace as JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("weights", help="weight file utilities")
    wsub = s.add_subparsers(dest="weights_command", required=True)
    w = wsub.add_parser("init", help="write seeded random weights")
    w.add_argument("--seed", type=int, required=True)
    w.add_argument("--config")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_weights_init)

    s = sub.add_parser("bench", help="benchmarks")
    bsub = s.add_subparsers(dest="bench_command", required=True)
    b = bsub.add_parser("query", help="voxel query vs ball query latency (CSV)")
    b.add_argument("--n", default="10000,100000", help="comma-separated voxel counts")
    b.add_argument("--k", type=int, default=16)
    b.add_argument("--threshold", type=int, default=4)
    b.add_argument("--reps", type=int, default=1000, help="queries timed per point (minimum 1000)")
    b.add_argument("--seed", type=int, required=True)
    b.set_defaults(func=cmd_bench_query)
    b = bsub.add_parser("agg", help="original vs accelerated aggregation (CSV)")
    b.add_argument("--cases", type=int, default=20)
    b.add_argument("--seed", type=int, required=True)
    b.set_defaults(func=cmd_bench_agg)

    s = sub.add_parser("eval", help="average precision of detections vs ground truth")
    s.add_argument("--dets", required=True)
    s.add_argument("--gts", required=True)
    s.add_argument("--iou", type=float, default=0.7)
    s.add_argument("--mode", choices=["r11", "r40"], default="r40")
    s.add_argument("--kind", choices=["3d", "bev"], default="3d")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a seeded synthetic scene")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--objects", type=int, default=8)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="<points.bin>,<boxes.txt>")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("losses", help="loss evaluation")
    lsub = s.add_subparsers(dest="losses_command", required=True)
    l_ = lsub.add_parser("eval", help="evaluate a JSON loss bundle")
    l_.add_argument("--bundle", required=True)
    l_.set_defaults(func=cmd_losses_eval)

    s = sub.add_parser("config", help="print the effective configuration")
    s.add_argument("--config")
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("selftest", help="run every acceptance check")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (PipelineError, ValueError, OSError) as exc:
        print(f"vrk {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
