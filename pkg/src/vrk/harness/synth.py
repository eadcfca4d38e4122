"""Seeded synthetic driving scenes: car-sized boxes on a flat ground plane."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geom3d import Box3D, bev_corners, iou_bev
from ..voxelizer import KITTI, VoxelizationConfig, voxelize

CAR_DIMS = (3.9, 1.6, 1.56)
GROUND_Z = -1.73
MAX_PLACEMENT_TRIES = 200


@dataclass
class SyntheticScene:
    points: np.ndarray  # (P, 4) float32
    boxes: list
    seed: int
    occupancy: float
    requested_objects: int

    @property
    def placement_shortfall(self) -> int:
        return self.requested_objects - len(self.boxes)


def _box_inside(box: Box3D, cfg: VoxelizationConfig, margin: float = 0.5) -> bool:
    corners = bev_corners(box)
    lo, hi = cfg.range_min, cfg.range_max
    if np.any(corners[:, 0] < lo[0] + margin) or np.any(corners[:, 0] > hi[0] - margin):
        return False
    if np.any(corners[:, 1] < lo[1] + margin) or np.any(corners[:, 1] > hi[1] - margin):
        return False
    return lo[2] <= box.cz - box.h / 2 and box.cz + box.h / 2 < hi[2]


def _surface_points(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the five visible faces (no bottom) of a box."""
    l, w, h = box.l, box.w, box.h
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3))
    local = u * np.array([l, w, h])
    local[face == 0, 0] = 0.5 * l
    local[face == 1, 0] = -0.5 * l
    local[face == 2, 1] = 0.5 * w
    local[face == 3, 1] = -0.5 * w
    local[face == 4, 2] = 0.5 * h
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    pts = np.empty_like(local)
    pts[:, 0] = c * local[:, 0] - s * local[:, 1] + box.cx
    pts[:, 1] = s * local[:, 0] + c * local[:, 1] + box.cy
    pts[:, 2] = local[:, 2] + box.cz
    return pts


def synth_scene(
    seed: int,
    n_objects: int = 8,
    cfg: VoxelizationConfig = KITTI,
    points_per_object: int = 400,
    clutter_points: int = 12000,
) -> SyntheticScene:
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    rng = np.random.default_rng(seed)
    lo, hi = cfg.range_min, cfg.range_max
    boxes: list[Box3D] = []
    for _ in range(n_objects):
        for _try in range(MAX_PLACEMENT_TRIES):
            dims = np.array(CAR_DIMS) * rng.uniform(0.8, 1.2, size=3)
            cand = Box3D(
                float(rng.uniform(lo[0], hi[0])),
                float(rng.uniform(lo[1], hi[1])),
                GROUND_Z + dims[2] / 2,
                *(float(d) for d in dims),
                yaw=float(rng.uniform(-math.pi, math.pi)),
            )
            # all boxes stand on the ground, so BEV overlap is 3D overlap
            if _box_inside(cand, cfg) and all(iou_bev(cand, b) == 0.0 for b in boxes):
                boxes.append(cand)
                break
    parts = []
    for b in boxes:
        pts = _surface_points(b, points_per_object, rng)
        parts.append(np.concatenate([pts, rng.uniform(0.0, 1.0, size=(len(pts), 1))], axis=1))
    ground = np.empty((clutter_points, 4))
    ground[:, 0] = rng.uniform(lo[0], hi[0], clutter_points)
    ground[:, 1] = rng.uniform(lo[1], hi[1], clutter_points)
    ground[:, 2] = GROUND_Z + rng.normal(0.0, 0.03, clutter_points)
    ground[:, 3] = rng.uniform(0.0, 0.3, clutter_points)
    parts.append(ground)
    points = np.concatenate(parts, axis=0).astype(np.float32)
    grid = voxelize(points, cfg)
    occupancy = len(grid) / float(np.prod(cfg.grid_dims))
    return SyntheticScene(points, boxes, seed, occupancy, n_objects)
