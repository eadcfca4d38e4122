"""Sparse 3D conv backbone, 2D BEV backbone and RPN heads (inference only).

Weights are plain float32 arrays; activations are computed in float64.
Convolutions are cross-correlations: output ``o`` reads input
``stride * o + t - 1`` for kernel tap ``t`` in ``0..2`` per axis.
"""
from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import geom3d
from .voxelizer import SparseVoxelGrid, pack_keys

WEIGHTS_FORMAT = "vrk-weights"
WEIGHTS_VERSION = 1

KERNEL_TAPS = list(itertools.product(range(3), repeat=3))


@dataclass
class ConvLayerParams:
    name: str
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    mode: str | None = None  # "submanifold" | "regular" for 3D convs

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 4
    stage_channels: tuple = (16, 32, 48, 64)
    bev_channels: tuple = (64, 128)
    bev_layers: tuple = (5, 5)
    bev_nz: int = 5  # z cells of the stride-8 volume, stacked into BEV channels
    num_yaw: int = 2
    roi_grid: int = 6
    roi_thresholds: tuple = (2, 4)
    agg_channels: int = 32
    head_hidden: int = 256

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @property
    def fused_channels(self) -> int:
        return sum(self.bev_channels)

    @property
    def roi_feature_width(self) -> int:
        return self.roi_grid ** 3 * 2 * len(self.roi_thresholds) * self.agg_channels


def layer_specs(cfg: NetworkConfig) -> list[dict]:
    """Ordered layer table: name, weight shape, stride, mode."""
    specs = []
    c_prev = cfg.in_channels
    for s, c in enumerate(cfg.stage_channels, start=1):
        if s == 1:
            specs.append(dict(name="conv1_1", shape=(c, c_prev, 3, 3, 3), stride=1, mode="submanifold"))
        else:
            specs.append(dict(name=f"conv{s}_1", shape=(c, c_prev, 3, 3, 3), stride=2, mode="regular"))
        specs.append(dict(name=f"conv{s}_2", shape=(c, c, 3, 3, 3), stride=1, mode="submanifold"))
        c_prev = c
    c_prev = cfg.stage_channels[-1] * cfg.bev_nz
    for b, (c, n) in enumerate(zip(cfg.bev_channels, cfg.bev_layers), start=1):
        for li in range(n):
            stride = 2 if (b > 1 and li == 0) else 1
            specs.append(dict(name=f"bev{b}_{li + 1}", shape=(c, c_prev, 3, 3), stride=stride, mode=None))
            c_prev = c
    fused = cfg.fused_channels
    specs.append(dict(name="rpn_cls", shape=(cfg.num_yaw, fused), stride=1, mode=None))
    specs.append(dict(name="rpn_reg", shape=(7 * cfg.num_yaw, fused), stride=1, mode=None))
    for stage, c in zip((3, 4), cfg.stage_channels[-2:]):
        for thr in cfg.roi_thresholds:
            specs.append(dict(name=f"agg_s{stage}_d{thr}", shape=(cfg.agg_channels, c + 3), stride=1, mode=None))
    specs.append(dict(name="head_fc1", shape=(cfg.head_hidden, cfg.roi_feature_width), stride=1, mode=None))
    specs.append(dict(name="head_fc2", shape=(cfg.head_hidden, cfg.head_hidden), stride=1, mode=None))
    specs.append(dict(name="head_cls", shape=(1, cfg.head_hidden), stride=1, mode=None))
    specs.append(dict(name="head_reg", shape=(7, cfg.head_hidden), stride=1, mode=None))
    return specs


@dataclass
class NetworkParams:
    seed: int | None
    layers: dict = field(default_factory=dict)
    config: NetworkConfig = field(default_factory=NetworkConfig)

    def __getitem__(self, name: str) -> ConvLayerParams:
        return self.layers[name]

    def backbone3d_layers(self) -> list[ConvLayerParams]:
        return [v for k, v in self.layers.items() if k.startswith("conv")]

    def bev_block(self, b: int) -> list[ConvLayerParams]:
        return [v for k, v in self.layers.items() if k.startswith(f"bev{b}_")]

    def audit(self) -> None:
        """Raise if any layer's shape disagrees with the declared architecture."""
        for spec in layer_specs(self.config):
            name = spec["name"]
            if name not in self.layers:
                raise ValueError(f"layer {name}: missing")
            layer = self.layers[name]
            if tuple(layer.weight.shape) != tuple(spec["shape"]):
                raise ValueError(f"layer {name}: weight shape {layer.weight.shape}, expected {spec['shape']}")
            if layer.bias.shape != (spec["shape"][0],):
                raise ValueError(f"layer {name}: bias shape {layer.bias.shape}, expected ({spec['shape'][0]},)")
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ValueError(f"layer {name}: non-finite values")


def init_params(seed: int, cfg: NetworkConfig | None = None) -> NetworkParams:
    """Uniform init in [-s, s], s = 1/sqrt(fan_in), float32, fixed layer order."""
    cfg = cfg or NetworkConfig()
    rng = np.random.default_rng(seed)
    layers = {}
    for spec in layer_specs(cfg):
        shape = spec["shape"]
        fan_in = int(np.prod(shape[1:]))
        s = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-s, s, size=shape).astype(np.float32)
        b = rng.uniform(-s, s, size=shape[0]).astype(np.float32)
        layers[spec["name"]] = ConvLayerParams(spec["name"], w, b, spec["stride"], spec["mode"])
    return NetworkParams(seed, layers, cfg)


def save_params(params: NetworkParams, path) -> None:
    os.makedirs(path, exist_ok=True)
    entries = []
    for name, layer in params.layers.items():
        wfile, bfile = f"{name}.weight.f32", f"{name}.bias.f32"
        with open(os.path.join(path, wfile), "wb") as fh:
            fh.write(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        with open(os.path.join(path, bfile), "wb") as fh:
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
        entries.append(
            {
                "name": name,
                "weight_shape": list(layer.weight.shape),
                "bias_shape": list(layer.bias.shape),
                "stride": layer.stride,
                "mode": layer.mode,
                "weight_file": wfile,
                "bias_file": bfile,
            }
        )
    manifest = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "seed": params.seed,
        "config": params.config.to_dict(),
        "layers": entries,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_blob(path, name, shape):
    expected = int(np.prod(shape)) * 4
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ValueError(f"layer {name}: cannot read {path}: {exc}") from exc
    if len(raw) != expected:
        raise ValueError(f"layer {name}: {path} has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def load_params(path) -> NetworkParams:
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read weights manifest {mpath}: {exc}") from exc
    if manifest.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"{mpath}: not a {WEIGHTS_FORMAT} manifest")
    cfg = NetworkConfig.from_dict(manifest.get("config", {}))
    layers = {}
    for entry in manifest["layers"]:
        name = entry.get("name", "<unnamed>")
        try:
            wshape = tuple(entry["weight_shape"])
            bshape = tuple(entry["bias_shape"])
            w = _read_blob(os.path.join(path, entry["weight_file"]), name, wshape)
            b = _read_blob(os.path.join(path, entry["bias_file"]), name, bshape)
        except KeyError as exc:
            raise ValueError(f"layer {name}: manifest entry missing {exc}") from exc
        layers[name] = ConvLayerParams(name, w, b, int(entry.get("stride", 1)), entry.get("mode"))
    params = NetworkParams(manifest.get("seed"), layers, cfg)
    params.audit()
    return params


# ---------------------------------------------------------------------------
# sparse 3D convolution
# ---------------------------------------------------------------------------

def _lex_sorted(coords: np.ndarray) -> np.ndarray:
    keys = pack_keys(coords)
    return coords[np.argsort(keys, kind="stable")]


def sparse_conv3d(grid: SparseVoxelGrid, layer: ConvLayerParams, relu: bool = True) -> SparseVoxelGrid:
    if layer.c_in != grid.num_channels:
        raise ValueError(f"layer {layer.name}: expects {layer.c_in} input channels, grid has {grid.num_channels}")
    mode = layer.mode or "submanifold"
    stride = layer.stride
    if mode == "submanifold":
        if stride != 1:
            raise ValueError(f"layer {layer.name}: submanifold convolution requires stride 1")
        out_dims = grid.dims
        out_coords = _lex_sorted(grid.coords)
    elif mode == "regular":
        if stride not in (1, 2):
            raise ValueError(f"layer {layer.name}: stride must be 1 or 2")
        out_dims = tuple((d + 1) // 2 for d in grid.dims) if stride == 2 else grid.dims
        if stride == 2:
            cand = grid.coords // 2
        else:
            offs = np.array(KERNEL_TAPS) - 1
            cand = (grid.coords[:, None, :] + offs[None]).reshape(-1, 3)
            cand = cand[np.all((cand >= 0) & (cand < np.asarray(out_dims)), axis=1)]
        out_coords = np.unique(cand, axis=0) if len(cand) else np.zeros((0, 3), np.int64)
        out_coords = _lex_sorted(out_coords)
    else:
        raise ValueError(f"layer {layer.name}: unknown conv mode {mode!r}")

    feats = np.asarray(grid.features, dtype=np.float64)
    # (3, 3, 3, C_in, C_out) so every tap is a contiguous BLAS operand
    w = np.ascontiguousarray(np.asarray(layer.weight, dtype=np.float64).transpose(2, 3, 4, 1, 0))
    out = np.tile(np.asarray(layer.bias, dtype=np.float64), (len(out_coords), 1))
    if len(out_coords):
        base = out_coords * stride
        for a, b, c in KERNEL_TAPS:
            rows = grid.lookup(base + np.array([a - 1, b - 1, c - 1]))
            hit = rows >= 0
            if not hit.any():
                continue
            out[hit] += feats[rows[hit]] @ w[a, b, c]
    if relu:
        np.maximum(out, 0.0, out=out)
    return SparseVoxelGrid(out_coords, out, grid.stride * stride, out_dims, grid.config)


def backbone3d_forward(grid: SparseVoxelGrid, params: NetworkParams) -> list[SparseVoxelGrid]:
    """Four stage outputs at cumulative strides 1, 2, 4, 8."""
    if grid.stride != 1:
        raise ValueError(f"backbone input must be stride 1, got {grid.stride}")
    layers = params.backbone3d_layers()
    stages = []
    x = grid
    for first, second in zip(layers[0::2], layers[1::2]):
        x = sparse_conv3d(x, first)
        x = sparse_conv3d(x, second)
        stages.append(x)
    return stages


# ---------------------------------------------------------------------------
# dense 2D backbone
# ---------------------------------------------------------------------------

def conv2d(x: np.ndarray, layer: ConvLayerParams, relu: bool = True) -> np.ndarray:
    """3x3 conv with zero padding 1 on an (nx, ny, C) map."""
    nx, ny, cin = x.shape
    if cin != layer.c_in:
        raise ValueError(f"layer {layer.name}: expects {layer.c_in} channels, map has {cin}")
    s = layer.stride
    ox, oy = (nx + s - 1) // s, (ny + s - 1) // s
    xp = np.zeros((nx + 2, ny + 2, cin))
    xp[1:-1, 1:-1] = x
    w = np.ascontiguousarray(np.asarray(layer.weight, dtype=np.float64).transpose(2, 3, 1, 0))
    out = np.zeros((ox * oy, layer.c_out))
    for a in range(3):
        for b in range(3):
            patch = xp[a:a + s * ox:s, b:b + s * oy:s]
            out += patch.reshape(-1, cin) @ w[a, b]
    out += np.asarray(layer.bias, dtype=np.float64)
    if relu:
        np.maximum(out, 0.0, out=out)
    return out.reshape(ox, oy, layer.c_out)


def upsample_nearest(x: np.ndarray, factor: int, shape: tuple) -> np.ndarray:
    up = np.repeat(np.repeat(x, factor, axis=0), factor, axis=1)
    return up[: shape[0], : shape[1]]


def backbone2d_forward(bev: np.ndarray, params: NetworkParams) -> np.ndarray:
    cfg = params.config
    expected = cfg.stage_channels[-1] * cfg.bev_nz
    if bev.ndim != 3 or bev.shape[2] != expected:
        raise ValueError(f"BEV map has shape {bev.shape}, expected (nx, ny, {expected})")
    x = np.asarray(bev, dtype=np.float64)
    for layer in params.bev_block(1):
        x = conv2d(x, layer)
    block1 = x
    for layer in params.bev_block(2):
        x = conv2d(x, layer)
    block2 = upsample_nearest(x, 2, block1.shape[:2])
    return np.concatenate([block1, block2], axis=2)


# ---------------------------------------------------------------------------
# RPN
# ---------------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


@dataclass
class ProposalSet:
    logits: np.ndarray  # (A,)
    residuals: np.ndarray  # (A, 7)
    boxes: np.ndarray  # (P, 7) decoded, post-NMS
    scores: np.ndarray  # (P,)
    anchor_indices: np.ndarray  # (P,)

    def __len__(self) -> int:
        return len(self.boxes)

    def scored_boxes(self) -> list[geom3d.ScoredBox]:
        return [geom3d.ScoredBox(geom3d.Box3D.from_array(b), float(s)) for b, s in zip(self.boxes, self.scores)]


def rpn_heads(features: np.ndarray, params: NetworkParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor logits (A,) and residuals (A, 7) in y-outer / x-inner / yaw order."""
    nx, ny, c = features.shape
    flat = np.transpose(features, (1, 0, 2)).reshape(ny * nx, c)
    cls, reg = params["rpn_cls"], params["rpn_reg"]
    logits = flat @ np.asarray(cls.weight, np.float64).T + cls.bias
    resid = flat @ np.asarray(reg.weight, np.float64).T + reg.bias
    return logits.reshape(-1), resid.reshape(-1, 7)


def select_proposals(
    logits: np.ndarray,
    residuals: np.ndarray,
    anchors: np.ndarray,
    nms_threshold: float = 0.7,
    top_k: int = 100,
    pre_nms_top_k: int = 1024,
) -> ProposalSet:
    scores = sigmoid(logits)
    n = len(scores)
    order = np.lexsort((np.arange(n), -scores))[:pre_nms_top_k]
    boxes = geom3d.decode_boxes(anchors[order], residuals[order])
    keep = geom3d.nms_arrays(boxes, scores[order], nms_threshold, "bev")[:top_k]
    keep = np.asarray(keep, dtype=np.int64)
    return ProposalSet(logits, residuals, boxes[keep].reshape(-1, 7), scores[order][keep], order[keep])


def rpn_forward(
    features: np.ndarray,
    anchors,
    params: NetworkParams,
    nms_threshold: float = 0.7,
    top_k: int = 100,
    pre_nms_top_k: int = 1024,
) -> ProposalSet:
    anchors = geom3d.boxes_to_array(anchors) if not isinstance(anchors, np.ndarray) else anchors
    logits, resid = rpn_heads(features, params)
    if len(logits) != len(anchors):
        raise ValueError(f"{len(anchors)} anchors but heads produced {len(logits)} outputs")
    return select_proposals(logits, resid, anchors, nms_threshold, top_k, pre_nms_top_k)
