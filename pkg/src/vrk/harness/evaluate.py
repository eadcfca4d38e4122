"""Average precision at fixed recall positions (11-point or 40-point)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom3d import boxes_to_array, iou_matrix


class EvaluationError(ValueError):
    """AP is undefined for the given input (e.g. a frame with no ground truth)."""


def recall_positions(mode: str) -> np.ndarray:
    if mode in ("r11", "recall-11"):
        return np.arange(11) / 10.0
    if mode in ("r40", "recall-40"):
        return np.arange(1, 41) / 40.0
    raise ValueError(f"unknown AP mode {mode!r} (expected r11 or r40)")


@dataclass
class EvalResult:
    recall: np.ndarray  # per detection rank
    precision: np.ndarray
    sample_recall: np.ndarray
    sample_precision: np.ndarray  # interpolated
    ap: float
    mode: str
    iou_threshold: float
    tp: np.ndarray

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "mode": self.mode,
            "iou_threshold": self.iou_threshold,
            "num_dets": int(len(self.tp)),
            "num_tp": int(np.sum(self.tp)),
            "samples": [[float(r), float(p)] for r, p in zip(self.sample_recall, self.sample_precision)],
        }


def evaluate_ap(dets, gts, iou_threshold: float = 0.7, mode: str = "r40", iou_kind: str = "3d") -> EvalResult:
    """Greedy score-ordered matching, max-interpolated precision at fixed recalls.

    Raises :class:`EvaluationError` when ``gts`` is empty.
    """
    samples = recall_positions(mode)
    gt_arr = boxes_to_array(gts)
    if len(gt_arr) == 0:
        raise EvaluationError("AP is undefined without ground-truth boxes")
    scores = np.array([d.score for d in dets], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("detection scores must be finite")
    det_arr = boxes_to_array(dets)
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = iou_matrix(det_arr[order], gt_arr, iou_kind) if len(order) else np.zeros((0, len(gt_arr)))
    taken = np.zeros(len(gt_arr), dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for rank in range(len(order)):
        row = np.where(taken, -1.0, ious[rank])
        best = int(np.argmax(row)) if len(row) else -1
        if best >= 0 and row[best] >= iou_threshold:
            taken[best] = True
            tp[rank] = True
    ctp = np.cumsum(tp)
    recall = ctp / len(gt_arr)
    precision = ctp / np.arange(1, len(order) + 1) if len(order) else np.zeros(0)
    # linspace(0, 1, 11)[3] is 0.30000000000000004, so compare with slack
    reached = recall[None, :] >= samples[:, None] - 1e-12
    interp = np.array([precision[m].max() if m.any() else 0.0 for m in reached])
    return EvalResult(recall, precision, samples, interp, float(interp.mean()), mode, iou_threshold, tp)

