"""Oriented 3D box geometry: rotated IoU, NMS, residual coding and anchors.

Boxes are 7-DoF ``(cx, cy, cz, l, w, h, yaw)`` with ``cz`` the geometric
center, ``l`` along the heading direction and ``yaw`` measured from +x
towards +y.  Most hot paths work on ``(N, 7)`` float arrays; the
:class:`Box3D` dataclass is the public value type.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi
CLIP_EPS = 1e-9


def normalize_yaw(yaw):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    out = np.mod(np.asarray(yaw, dtype=np.float64) + math.pi, TWO_PI) - math.pi
    # mod can round up to exactly pi for inputs a hair below -pi
    out = np.where(out >= math.pi, out - TWO_PI, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dims must be positive, got l={self.l} w={self.w} h={self.h}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])

    @classmethod
    def from_array(cls, arr) -> "Box3D":
        a = [float(v) for v in arr]
        return cls(*a[:7])

    def translated(self, dx=0.0, dy=0.0, dz=0.0) -> "Box3D":
        return Box3D(self.cx + dx, self.cy + dy, self.cz + dz, self.l, self.w, self.h, self.yaw)


@dataclass(frozen=True)
class ScoredBox:
    box: Box3D
    score: float
    label: int = 1

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class AnchorConfig:
    size: tuple = (3.9, 1.6, 1.56)
    z_center: float = -1.0
    yaw_set: tuple = (0.0, math.pi / 2)
    bev_stride: int = 8

    def __post_init__(self):
        if len(self.yaw_set) == 0:
            raise ValueError("yaw_set must be non-empty")
        if any(s <= 0 for s in self.size):
            raise ValueError("anchor size components must be positive")


def boxes_to_array(boxes: Iterable) -> np.ndarray:
    rows = []
    for b in boxes:
        if isinstance(b, ScoredBox):
            b = b.box
        rows.append(b.to_array() if isinstance(b, Box3D) else np.asarray(b, dtype=np.float64))
    if not rows:
        return np.zeros((0, 7))
    return np.stack(rows).astype(np.float64)


def array_to_boxes(arr: np.ndarray) -> list[Box3D]:
    return [Box3D.from_array(row) for row in np.asarray(arr)]


# ---------------------------------------------------------------------------
# BEV polygon geometry
# ---------------------------------------------------------------------------

def bev_corners(box) -> np.ndarray:
    """Counter-clockwise BEV footprint corners, shape (4, 2)."""
    cx, cy, _, l, w, _, yaw = (box.to_array() if isinstance(box, Box3D) else box)[:7]
    c, s = math.cos(yaw), math.sin(yaw)
    local = ((0.5 * l, 0.5 * w), (-0.5 * l, 0.5 * w), (-0.5 * l, -0.5 * w), (0.5 * l, -0.5 * w))
    return np.array([(cx + c * x - s * y, cy + s * x + c * y) for x, y in local])


def _polygon_area(poly) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for idx in range(n):
        x1, y1 = poly[idx]
        x2, y2 = poly[(idx + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * abs(acc)


def _clip_convex(subject, clipper):
    """Sutherland-Hodgman clipping of ``subject`` against convex CCW ``clipper``."""
    output = [tuple(p) for p in subject]
    m = len(clipper)
    for e in range(m):
        if not output:
            break
        ax, ay = clipper[e]
        bx, by = clipper[(e + 1) % m]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = output
        output = []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= -CLIP_EPS:
                if s_prev < -CLIP_EPS:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= -CLIP_EPS:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return output


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a, b) -> float:
    return _polygon_area(_clip_convex(bev_corners(a), bev_corners(b)))


def _as_arr(box) -> np.ndarray:
    if isinstance(box, ScoredBox):
        box = box.box
    return box.to_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)


def iou_bev(a, b) -> float:
    a, b = _as_arr(a), _as_arr(b)
    inter = bev_intersection_area(a, b)
    union = a[3] * a[4] + b[3] * b[4] - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a, b) -> float:
    a, b = _as_arr(a), _as_arr(b)
    zlo = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
    zhi = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
    dz = zhi - zlo
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def _bev_radius(arr: np.ndarray) -> np.ndarray:
    return 0.5 * np.hypot(arr[:, 3], arr[:, 4])


def iou_matrix(a: np.ndarray, b: np.ndarray, kind: str = "bev") -> np.ndarray:
    """Pairwise IoU between two (N, 7) / (M, 7) arrays.

    Pairs whose circumscribed circles do not touch are skipped, so sparse
    layouts (anchors vs a handful of objects) stay cheap.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    fn = _iou_fn(kind)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ra, rb = _bev_radius(a), _bev_radius(b)
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    cand = dist < (ra[:, None] + rb[None, :])
    if kind == "3d":
        zov = np.minimum(a[:, None, 2] + 0.5 * a[:, None, 5], b[None, :, 2] + 0.5 * b[None, :, 5]) - np.maximum(
            a[:, None, 2] - 0.5 * a[:, None, 5], b[None, :, 2] - 0.5 * b[None, :, 5]
        )
        cand &= zov > 0
    for i, j in zip(*np.nonzero(cand)):
        out[i, j] = fn(a[i], b[j])
    return out


def _iou_fn(kind: str):
    if kind == "bev":
        return iou_bev
    if kind == "3d":
        return iou_3d
    raise ValueError(f"unknown iou kind {kind!r} (expected 'bev' or '3d')")


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def nms_arrays(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, iou_kind: str = "bev") -> list[int]:
    """Greedy NMS on arrays; returns kept indices in descending score order.

    A box is suppressed when its IoU with an already kept box exceeds
    ``iou_threshold``.  Equal scores keep the lower original index first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(boxes)
    if n == 0:
        return []
    fn = _iou_fn(iou_kind)
    order = np.lexsort((np.arange(n), -scores))
    radius = _bev_radius(boxes)
    alive = np.ones(n, dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        rest = rest[alive[rest]]
        if len(rest) == 0:
            continue
        near = np.hypot(boxes[rest, 0] - boxes[i, 0], boxes[rest, 1] - boxes[i, 1]) < radius[rest] + radius[i]
        for j in rest[near]:
            if fn(boxes[i], boxes[j]) > iou_threshold:
                alive[j] = False
    return keep


def nms(boxes: Sequence[ScoredBox], iou_threshold: float, iou_kind: str = "bev") -> list[int]:
    if len(boxes) == 0:
        return []
    arr = boxes_to_array(boxes)
    scores = np.array([b.score for b in boxes], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return nms_arrays(arr, scores, iou_threshold, iou_kind)


# ---------------------------------------------------------------------------
# residual coding
# ---------------------------------------------------------------------------

def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 7)
    xa, ya, za, la, wa, ha, ra = anchors.T
    xg, yg, zg, lg, wg, hg, rg = targets.T
    diag = np.sqrt(la ** 2 + wa ** 2)
    return np.stack(
        [
            (xg - xa) / diag,
            (yg - ya) / diag,
            (zg - za) / ha,
            np.log(lg / la),
            np.log(wg / wa),
            np.log(hg / ha),
            normalize_yaw(rg - ra) * np.ones_like(rg),
        ],
        axis=1,
    )


def decode_boxes(anchors: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    residuals = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    xa, ya, za, la, wa, ha, ra = anchors.T
    dx, dy, dz, dl, dw, dh, dr = residuals.T
    diag = np.sqrt(la ** 2 + wa ** 2)
    return np.stack(
        [
            xa + dx * diag,
            ya + dy * diag,
            za + dz * ha,
            la * np.exp(dl),
            wa * np.exp(dw),
            ha * np.exp(dh),
            normalize_yaw(ra + dr) * np.ones_like(ra),
        ],
        axis=1,
    )


def encode_box(anchor: Box3D, target: Box3D) -> np.ndarray:
    return encode_boxes(anchor.to_array(), target.to_array())[0]


def decode_box(anchor: Box3D, residual) -> Box3D:
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape != (7,) or not np.all(np.isfinite(residual)):
        raise ValueError("residual must be a finite 7-vector")
    return Box3D.from_array(decode_boxes(anchor.to_array(), residual)[0])


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------

def anchor_array(cfg: AnchorConfig, bev_dims, voxel_cfg) -> np.ndarray:
    """Anchors as an (ny * nx * n_yaw, 7) array, y-outer / x-inner / yaw-innermost."""
    nx, ny = (int(v) for v in bev_dims)
    if nx <= 0 or ny <= 0:
        raise ValueError(f"bev dims must be positive, got {bev_dims}")
    lo = np.asarray(voxel_cfg.range_min, dtype=np.float64)
    size = np.asarray(voxel_cfg.voxel_size, dtype=np.float64)
    xs = lo[0] + (np.arange(nx) + 0.5) * size[0] * cfg.bev_stride
    ys = lo[1] + (np.arange(ny) + 0.5) * size[1] * cfg.bev_stride
    yaws = np.asarray(cfg.yaw_set, dtype=np.float64)
    yy, xx, rr = np.meshgrid(ys, xs, yaws, indexing="ij")
    n = yy.size
    l, w, h = cfg.size
    out = np.empty((n, 7))
    out[:, 0] = xx.ravel()
    out[:, 1] = yy.ravel()
    out[:, 2] = cfg.z_center
    out[:, 3] = l
    out[:, 4] = w
    out[:, 5] = h
    out[:, 6] = normalize_yaw(rr.ravel())
    return out


def generate_anchors(cfg: AnchorConfig, bev_dims, voxel_cfg) -> list[Box3D]:
    return array_to_boxes(anchor_array(cfg, bev_dims, voxel_cfg))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def format_box_line(box, score: float | None = None) -> str:
    vals = list(_as_arr(box)[:7])
    if score is not None:
        vals.append(score)
    return " ".join(f"{v:.6f}" for v in vals)


def write_boxes_text(path, boxes: Sequence) -> None:
    lines = []
    for b in boxes:
        if isinstance(b, ScoredBox):
            lines.append(format_box_line(b.box, b.score))
        else:
            lines.append(format_box_line(b))
    with open(path, "w") as fh:
        fh.write("".join(line + "\n" for line in lines))


def read_boxes_text(path) -> list:
    """Parse the line format; lines with 8 fields become :class:`ScoredBox`."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (7, 8):
                raise ValueError(f"{path}:{lineno}: expected 7 or 8 fields, got {len(parts)}")
            vals = [float(p) for p in parts]
            box = Box3D(*vals[:7])
            out.append(ScoredBox(box, vals[7]) if len(vals) == 8 else box)
    return out


def box_to_dict(box) -> dict:
    if isinstance(box, ScoredBox):
        d = box_to_dict(box.box)
        d.update(score=box.score, label=box.label)
        return d
    return {k: getattr(box, k) for k in ("cx", "cy", "cz", "l", "w", "h", "yaw")}


def box_from_dict(d: dict):
    box = Box3D(*(float(d[k]) for k in ("cx", "cy", "cz", "l", "w", "h", "yaw")))
    if "score" in d:
        return ScoredBox(box, float(d["score"]), int(d.get("label", 1)))
    return box


def boxes_to_json(boxes: Sequence) -> str:
    return json.dumps([box_to_dict(b) for b in boxes], indent=1)


def boxes_from_json(text: str) -> list:
    return [box_from_dict(d) for d in json.loads(text)]
