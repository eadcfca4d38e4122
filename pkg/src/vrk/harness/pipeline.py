"""Point cloud -> detections, wiring every module together."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .. import geom3d, roipool, sparsenet
from ..voxelizer import to_bev, voxelize
from .config import PipelineConfig


class PipelineError(RuntimeError):
    pass


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:  # re-raised with the stage label attached
        raise PipelineError(f"{name}: {exc}") from exc


@dataclass
class PipelineResult:
    detections: list
    proposals: sparsenet.ProposalSet
    trace: dict = field(default_factory=dict)
    macs: int | None = None


def analytic_pool_macs(stage_grids, num_rois: int, cfg: roipool.RoiPoolConfig, mode: str) -> int:
    """Sum of the per-(stage, radius) aggregation formulas for one pooling call."""
    m = num_rois * cfg.grid_size ** 3
    total = 0
    for grid in stage_grids:
        for _ in cfg.thresholds:
            total += roipool.flop_count(mode, len(grid), m, cfg.k, grid.num_channels, cfg.out_channels)
    return total


def pipeline_forward(
    cloud: np.ndarray,
    params: sparsenet.NetworkParams,
    cfg: PipelineConfig = PipelineConfig(),
    agg: str = "accelerated",
    threads: int = 1,
    count_macs: bool = False,
) -> PipelineResult:
    cfg.validate()
    trace: dict = {}
    with _stage("params"):
        if params.config != cfg.network:
            raise ValueError("weights were built for a different network config")
        params.audit()
    with _stage("voxelize"):
        grid = voxelize(cloud, cfg.voxelization)
        trace["input"] = {"stride": 1, "dims": list(grid.dims), "channels": grid.num_channels, "voxels": len(grid)}
    with _stage("backbone3d"):
        stages = sparsenet.backbone3d_forward(grid, params)
        trace["stages"] = [
            {"stride": s.stride, "dims": list(s.dims), "channels": s.num_channels, "voxels": len(s)} for s in stages
        ]
    with _stage("to_bev"):
        bev = to_bev(stages[-1])
        trace["bev"] = list(bev.shape)
    with _stage("backbone2d"):
        fused = sparsenet.backbone2d_forward(bev, params)
        trace["fused"] = list(fused.shape)
    with _stage("rpn"):
        anchors = geom3d.anchor_array(cfg.anchors, fused.shape[:2], cfg.voxelization)
        proposals = sparsenet.rpn_forward(
            fused, anchors, params, cfg.rpn.nms_threshold, cfg.rpn.top_k, cfg.rpn.pre_nms_top_k
        )
        trace["anchors"] = len(anchors)
        trace["proposals"] = len(proposals)
    counter = roipool.MacCounter() if count_macs else None
    with _stage("roi_pool"):
        weights = roipool.aggregator_weights(params)
        feats = roipool.voxel_roi_pool(stages[2:], proposals.boxes, cfg.roi_pool, weights, agg, threads, counter)
        trace["roi_features"] = list(feats.flat.shape)
    with _stage("detect_head"):
        conf, resid = roipool.detect_head_forward(feats, roipool.HeadParams.from_network(params))
    with _stage("post"):
        boxes = geom3d.decode_boxes(proposals.boxes, resid) if len(proposals) else np.zeros((0, 7))
        scores = conf[:, 0]
        if cfg.post.score == "combined":
            scores = scores * proposals.scores
        scores = np.where(feats.outside, 0.0, scores) if len(scores) else scores
        keep = geom3d.nms_arrays(boxes, scores, cfg.post.nms_threshold, "bev")
        dets = [geom3d.ScoredBox(geom3d.Box3D.from_array(boxes[i]), float(scores[i])) for i in keep]
        trace["detections"] = len(dets)
    return PipelineResult(dets, proposals, trace, counter.count if counter else None)


def expected_trace(cfg: PipelineConfig) -> dict:
    """Shapes the architecture table prescribes for a given config."""
    net = cfg.network
    stages = []
    for n, c in enumerate(net.stage_channels):
        stride = 2 ** n
        stages.append({"stride": stride, "dims": list(cfg.voxelization.dims_at(stride)), "channels": c})
    nx, ny, nz = cfg.voxelization.dims_at(8)
    return {
        "stages": stages,
        "bev": [nx, ny, nz * net.stage_channels[-1]],
        "fused": [nx, ny, net.fused_channels],
        "roi_width": net.roi_feature_width,
    }


def trace_matches(trace: dict, cfg: PipelineConfig) -> bool:
    exp = expected_trace(cfg)
    got_stages = [{k: s[k] for k in ("stride", "dims", "channels")} for s in trace["stages"]]
    return (
        got_stages == exp["stages"]
        and trace["bev"] == exp["bev"]
        and trace["fused"] == exp["fused"]
        and (trace["proposals"] == 0 or trace["roi_features"][1] == exp["roi_width"])
    )
