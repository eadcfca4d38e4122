"""Target assignment and loss evaluation for the RPN and the refinement head.

Everything here is a pure evaluator over numpy arrays; there is no
optimizer or gradient code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom3d

PROB_EPS = 1e-7


@dataclass(frozen=True)
class HeadLossConfig:
    theta_h: float = 0.75
    theta_l: float = 0.25
    theta_reg: float = 0.55
    num_samples: int = 128
    fg_fraction: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.theta_l < self.theta_h <= 1.0):
            raise ValueError("need 0 <= theta_l < theta_h <= 1")
        if not (0.0 < self.theta_reg < 1.0):
            raise ValueError("need 0 < theta_reg < 1")


@dataclass(frozen=True)
class RpnLossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    huber_delta: float = 1.0 / 9.0
    fg_iou: float = 0.6
    bg_iou: float = 0.45


@dataclass
class RpnTargets:
    labels: np.ndarray  # (A,) int: 1 fg, 0 bg, -1 ignore
    reg_targets: np.ndarray  # (A, 7), zeros off foreground
    matched_gt: np.ndarray  # (A,) int, -1 when none

    @property
    def num_fg(self) -> int:
        return int(np.sum(self.labels == 1))


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    reg: float

    @property
    def total(self) -> float:
        return self.cls + self.reg

    def to_dict(self) -> dict:
        return {"cls": self.cls, "reg": self.reg, "total": self.total}


def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)


def focal_loss(p, c, alpha: float = 0.25, gamma: float = 2.0):
    """Elementwise focal loss; ``c`` is 1 for positives, 0 for negatives."""
    p = _clamp(p)
    c = np.asarray(c)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p ** gamma * np.log(1.0 - p)
    out = np.where(c == 1, pos, neg)
    return float(out) if out.ndim == 0 else out


def bce_loss(p, target):
    """Binary cross-entropy against a soft target in [0, 1].

    Each log argument is floored at PROB_EPS, so a term whose coefficient
    is zero vanishes exactly and BCE(p=t) is 0 for hard targets.
    """
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    log_p = np.log(np.maximum(p, PROB_EPS))
    log_q = np.log(np.maximum(1.0 - p, PROB_EPS))
    out = -(np.where(t > 0, t * log_p, 0.0) + np.where(t < 1, (1.0 - t) * log_q, 0.0))
    return float(out) if out.ndim == 0 else out


def huber_loss(pred, target, delta: float = 1.0 / 9.0) -> float:
    """Sum over components of the unit-slope Huber penalty."""
    e = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    per = np.where(e <= delta, 0.5 * e * e / delta, e - 0.5 * delta)
    return float(np.sum(per))


def confidence_target(iou, cfg: HeadLossConfig = HeadLossConfig()):
    """IoU -> soft confidence target: 0 below theta_l, linear band, 1 from theta_h."""
    iou = np.asarray(iou, dtype=np.float64)
    out = np.clip((iou - cfg.theta_l) / (cfg.theta_h - cfg.theta_l), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def assign_rpn_targets(anchors, gt_boxes, cfg: RpnLossConfig = RpnLossConfig()) -> RpnTargets:
    anchors = geom3d.boxes_to_array(anchors) if not isinstance(anchors, np.ndarray) else anchors.reshape(-1, 7)
    gts = geom3d.boxes_to_array(gt_boxes) if not isinstance(gt_boxes, np.ndarray) else gt_boxes.reshape(-1, 7)
    a = len(anchors)
    labels = np.zeros(a, dtype=np.int64)
    reg = np.zeros((a, 7))
    matched = np.full(a, -1, dtype=np.int64)
    if len(gts) == 0 or a == 0:
        return RpnTargets(labels, reg, matched)
    ious = geom3d.iou_matrix(anchors, gts, "bev")
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(a), best_gt]
    labels[:] = -1
    labels[best_iou < cfg.bg_iou] = 0
    fg = best_iou >= cfg.fg_iou
    labels[fg] = 1
    matched[fg] = best_gt[fg]
    # every gt claims its best anchor, even below the background threshold
    for g in range(len(gts)):
        col = ious[:, g]
        if col.max() <= 0:
            continue
        best = int(np.argmax(col))
        labels[best] = 1
        matched[best] = g
    fg = labels == 1
    reg[fg] = geom3d.encode_boxes(anchors[fg], gts[matched[fg]])
    return RpnTargets(labels, reg, matched)


def rpn_loss(probs, residuals, targets: RpnTargets, cfg: RpnLossConfig = RpnLossConfig()) -> LossBreakdown:
    """Focal classification over non-ignored anchors plus Huber on foreground, / max(N_fg, 1)."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    residuals = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    labels = targets.labels
    if len(probs) != len(labels) or len(residuals) != len(labels):
        raise ValueError("predictions and targets disagree on anchor count")
    care = labels >= 0
    norm = max(targets.num_fg, 1)
    cls = float(np.sum(focal_loss(probs[care], labels[care], cfg.alpha, cfg.gamma))) if care.any() else 0.0
    fg = labels >= 1
    reg = sum(huber_loss(residuals[i], targets.reg_targets[i], cfg.huber_delta) for i in np.nonzero(fg)[0])
    return LossBreakdown(cls / norm, reg / norm)


def head_loss(
    confidences,
    residuals,
    ious,
    reg_targets,
    cfg: HeadLossConfig = HeadLossConfig(),
    huber_delta: float = 1.0 / 9.0,
) -> LossBreakdown:
    """Summed BCE against the IoU-derived target, plus Huber where IoU >= theta_reg, / N_s."""
    p = np.asarray(confidences, dtype=np.float64).reshape(-1)
    resid = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    ious = np.asarray(ious, dtype=np.float64).reshape(-1)
    tgt = np.asarray(reg_targets, dtype=np.float64).reshape(-1, 7)
    n = len(p)
    if not (len(resid) == len(ious) == len(tgt) == n):
        raise ValueError("head loss inputs must share length N_s")
    if n == 0:
        return LossBreakdown(0.0, 0.0)
    cls = float(np.sum(bce_loss(p, confidence_target(ious, cfg))))
    reg = sum(huber_loss(resid[i], tgt[i], huber_delta) for i in np.nonzero(ious >= cfg.theta_reg)[0])
    return LossBreakdown(cls / n, reg / n)


@dataclass
class RoiSample:
    indices: np.ndarray  # into the proposal list
    ious: np.ndarray  # 3D IoU with the matched gt
    matched_gt: np.ndarray  # -1 when there is no gt
    reg_targets: np.ndarray  # (S, 7) residual from RoI to matched gt
    num_positive: int


def sample_rois(proposals, gt_boxes, cfg: HeadLossConfig = HeadLossConfig(), seed: int = 0) -> RoiSample:
    """Draw up to N_s RoIs, at most ``fg_fraction`` of them with IoU > theta_reg.

    A short positive pool is topped up with negatives and vice versa.
    """
    props = geom3d.boxes_to_array(proposals) if not isinstance(proposals, np.ndarray) else proposals.reshape(-1, 7)
    gts = geom3d.boxes_to_array(gt_boxes) if not isinstance(gt_boxes, np.ndarray) else gt_boxes.reshape(-1, 7)
    rng = np.random.default_rng(seed)
    n = len(props)
    if n == 0:
        return RoiSample(np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64), np.zeros((0, 7)), 0)
    if len(gts):
        ious_all = geom3d.iou_matrix(props, gts, "3d")
        matched = ious_all.argmax(axis=1)
        ious = ious_all[np.arange(n), matched]
    else:
        matched = np.full(n, -1, np.int64)
        ious = np.zeros(n)
    pos = np.nonzero(ious > cfg.theta_reg)[0]
    neg = np.nonzero(ious <= cfg.theta_reg)[0]
    total = min(cfg.num_samples, n)
    n_pos = min(len(pos), int(cfg.num_samples * cfg.fg_fraction))
    n_neg = min(len(neg), total - n_pos)
    n_pos = min(len(pos), total - n_neg)  # top up from positives when negatives run short
    pick_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else np.zeros(0, np.int64)
    pick_neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else np.zeros(0, np.int64)
    idx = np.concatenate([pick_pos, pick_neg]).astype(np.int64)
    reg = np.zeros((len(idx), 7))
    has_gt = matched[idx] >= 0
    if has_gt.any():
        reg[has_gt] = geom3d.encode_boxes(props[idx[has_gt]], gts[matched[idx[has_gt]]])
    return RoiSample(idx, ious[idx], matched[idx], reg, int(n_pos))
