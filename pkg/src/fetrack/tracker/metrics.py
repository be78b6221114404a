"""Success rate, precision and normalized precision over a tracked sequence."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import DomainError
from .losses import box_iou

PRECISION_PX = 20.0
# Success curve thresholds 0, 0.05, ..., 0.95; the AUC is their mean, i.e. the
# left-rectangle integral over [0, 1].
SUCCESS_THRESHOLDS = np.arange(20) / 20.0
NORM_PRECISION_THRESHOLDS = np.arange(51) / 100.0


@dataclass
class TrackRecord:
    frame_index: int
    pred: np.ndarray  # (cx, cy, w, h) pixels
    gt: np.ndarray  # (cx, cy, w, h) pixels
    seconds: float = 0.0


@dataclass
class Metrics:
    sr: float
    pr: float
    npr: float

    def __iter__(self):
        return iter((self.sr, self.pr, self.npr))


def success_curve(ious):
    ious = np.asarray(ious, dtype=np.float64)
    return np.array([(ious > t).mean() for t in SUCCESS_THRESHOLDS])


def eval_boxes(pred, gt) -> Metrics:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if len(pred) == 0:
        raise DomainError("no frames to evaluate")
    if pred.shape != gt.shape:
        raise DomainError(f"{len(pred)} predictions for {len(gt)} ground-truth boxes")
    ious = box_iou(pred, gt)
    err = np.hypot(pred[:, 0] - gt[:, 0], pred[:, 1] - gt[:, 1])
    norm_err = np.hypot((pred[:, 0] - gt[:, 0]) / gt[:, 2], (pred[:, 1] - gt[:, 1]) / gt[:, 3])
    sr = success_curve(ious).mean()
    pr = (err <= PRECISION_PX).mean()
    npr = np.array([(norm_err <= t).mean() for t in NORM_PRECISION_THRESHOLDS]).mean()
    return Metrics(100.0 * sr, 100.0 * pr, 100.0 * npr)


def eval_metrics(records: Sequence[TrackRecord]) -> Metrics:
    if not records:
        raise DomainError("no track records")
    return eval_boxes([r.pred for r in records], [r.gt for r in records])


def mean_iou(records: Sequence[TrackRecord]) -> float:
    return float(box_iou(np.array([r.pred for r in records]), np.array([r.gt for r in records])).mean())


def fps(records: Sequence[TrackRecord]) -> Optional[float]:
    total = sum(r.seconds for r in records)
    return len(records) / total if total > 0 else None
