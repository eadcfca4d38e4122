"""Single JSON document configuring every stage of the pipeline."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

from ..geom3d import AnchorConfig
from ..roipool import RoiPoolConfig
from ..sparsenet import NetworkConfig
from ..targets import HeadLossConfig, RpnLossConfig
from ..voxelizer import PRESETS, VoxelizationConfig


@dataclass(frozen=True)
class RpnConfig:
    nms_threshold: float = 0.7
    top_k: int = 100
    pre_nms_top_k: int = 1024


@dataclass(frozen=True)
class PostConfig:
    nms_threshold: float = 0.1
    score: str = "confidence"  # or "combined": head confidence * RPN score


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    mode: str = "r40"
    kind: str = "3d"


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _to_dict(obj) -> dict:
    return {f.name: list(v) if isinstance(v := getattr(obj, f.name), tuple) else v for f in fields(obj)}


@dataclass(frozen=True)
class PipelineConfig:
    voxelization: VoxelizationConfig = field(default_factory=VoxelizationConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    roi_pool: RoiPoolConfig = field(default_factory=RoiPoolConfig)
    post: PostConfig = field(default_factory=PostConfig)
    rpn_loss: RpnLossConfig = field(default_factory=RpnLossConfig)
    head_loss: HeadLossConfig = field(default_factory=HeadLossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        nz = self.voxelization.dims_at(8)[2]
        if self.network.bev_nz != nz:
            raise ValueError(f"network.bev_nz={self.network.bev_nz} but the stride-8 volume has {nz} z cells")
        if self.network.agg_channels != self.roi_pool.out_channels:
            raise ValueError("network.agg_channels must equal roi_pool.out_channels")
        if tuple(self.network.roi_thresholds) != tuple(self.roi_pool.thresholds):
            raise ValueError("network.roi_thresholds must equal roi_pool.thresholds")
        if self.network.roi_grid != self.roi_pool.grid_size:
            raise ValueError("network.roi_grid must equal roi_pool.grid_size")
        if self.network.num_yaw != len(self.anchors.yaw_set):
            raise ValueError("network.num_yaw must equal the anchor yaw_set size")
        if self.anchors.bev_stride != 8:
            raise ValueError("anchors are tiled on the stride-8 BEV map")
        if self.post.score not in ("confidence", "combined"):
            raise ValueError(f"post.score must be 'confidence' or 'combined', got {self.post.score!r}")

    def to_dict(self) -> dict:
        return {f.name: (getattr(self, f.name).to_dict() if f.name in ("voxelization", "network")
                         else _to_dict(getattr(self, f.name))) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        base = cls.preset(preset) if preset else cls()
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            current = _to_dict(getattr(base, f.name)) if f.name not in ("voxelization", "network") else getattr(base, f.name).to_dict()
            merged = {**current, **d[f.name]}
            if f.name == "voxelization":
                kw[f.name] = VoxelizationConfig.from_dict(merged)
            elif f.name == "network":
                kw[f.name] = NetworkConfig.from_dict(merged)
            else:
                kw[f.name] = _from_dict(type(getattr(base, f.name)), merged)
        cfg = replace(base, **kw)
        cfg.validate()
        return cfg

    @classmethod
    def preset(cls, name: str) -> "PipelineConfig":
        if name == "kitti":
            return cls()
        if name == "waymo":
            net = NetworkConfig(bev_channels=(128, 256), agg_channels=64)
            return cls(voxelization=PRESETS["waymo"], network=net, roi_pool=RoiPoolConfig(out_channels=64))
        raise ValueError(f"unknown preset {name!r}")


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        return PipelineConfig.from_dict(json.load(fh))


def dump_config(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=1)

