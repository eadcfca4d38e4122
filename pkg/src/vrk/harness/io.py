"""Point cloud and detection file formats."""
from __future__ import annotations

import os

import numpy as np

from ..geom3d import read_boxes_text, write_boxes_text

POINT_BYTES = 16


def read_bin(path) -> np.ndarray:
    """KITTI ``.bin`` layout: little-endian float32 (x, y, z, intensity) quadruples."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % POINT_BYTES:
        whole = len(raw) - len(raw) % POINT_BYTES
        raise ValueError(f"{path}: truncated point record at byte offset {whole} (file is {len(raw)} bytes)")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).copy()


def write_bin(path, cloud) -> None:
    arr = np.ascontiguousarray(np.asarray(cloud).reshape(-1, 4), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())


def read_text_cloud(path) -> np.ndarray:
    arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if arr.size == 0:
        return np.zeros((0, 4), np.float32)
    if arr.shape[1] == 3:
        arr = np.concatenate([arr, np.zeros((len(arr), 1))], axis=1)
    if arr.shape[1] != 4:
        raise ValueError(f"{path}: expected 3 or 4 columns, got {arr.shape[1]}")
    return arr.astype(np.float32)


def read_cloud(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".txt", ".xyz", ".csv"):
        return read_text_cloud(path)
    return read_bin(path)


def write_detections(path, detections) -> None:
    write_boxes_text(path, detections)


read_detections = read_boxes_text
