"""Box utilities, target construction, and the weighted tracking loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
PROB_CLAMP = 1e-6


@dataclass
class BBox:
    """Center-size box. Normalized to the search region inside the tracker, pixels outside."""

    cx: float
    cy: float
    w: float
    h: float

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class LossWeights:
    focal: float = 1.0
    l1: float = 14.0
    giou: float = 1.0


def _boxes(b):
    return b.as_array() if isinstance(b, BBox) else np.asarray(b, dtype=np.float64)


# ---------------------------------------------------------------- decoding

def cosine_window(size):
    w = np.hanning(size + 2)[1:-1]
    return np.outer(w, w)


def decode_bbox(out, window=None):
    """Decode the highest-scoring cell. Ties go to the smallest row-major index."""
    cls = out.cls if window is None else out.cls * window
    s = cls.shape[-1]
    k = int(np.argmax(cls))
    i, j = divmod(k, s)
    off = out.offset[i, j]
    size = out.size[i, j]
    return BBox((j + float(off[0])) / s, (i + float(off[1])) / s, float(size[0]), float(size[1]))


def gt_cell(box, grid):
    """Cell indices (row, col) that contain the box center, clipped to the grid."""
    b = _boxes(box)
    j = np.clip(np.floor(b[..., 0] * grid), 0, grid - 1).astype(int)
    i = np.clip(np.floor(b[..., 1] * grid), 0, grid - 1).astype(int)
    return i, j


def make_cls_target(gt, grid):
    """Gaussian bump with peak exactly 1 at the cell holding the box center."""
    b = _boxes(gt)
    i0, j0 = gt_cell(b, grid)
    sigma = max(1.0, grid * min(b[2], b[3]) / 6.0)
    ii, jj = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    return np.exp(-((ii - i0) ** 2 + (jj - j0) ** 2) / (2.0 * sigma * sigma))


# ---------------------------------------------------------------- focal

def focal_loss_grad(pred, target, alpha=FOCAL_ALPHA, beta=FOCAL_BETA):
    """Penalty-reduced focal loss per map and its gradient w.r.t. ``pred``.

    pred/target: [..., S, S]. Returns ``(loss[...], grad)``; each map is
    normalized by its number of peak cells (at least 1).
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (pred >= PROB_CLAMP) & (pred <= 1.0 - PROB_CLAMP)
    pos = target == 1.0
    neg_w = (1.0 - target) ** beta
    log_p, log_q = np.log(p), np.log1p(-p)
    q = 1.0 - p
    loss_map = np.where(pos, -(q ** alpha) * log_p, -neg_w * p ** alpha * log_q)
    d_pos = alpha * q ** (alpha - 1) * log_p - q ** alpha / p
    d_neg = -neg_w * (alpha * p ** (alpha - 1) * log_q - p ** alpha / q)
    axes = (-2, -1)
    npos = np.maximum(pos.sum(axis=axes), 1)
    loss = loss_map.sum(axis=axes) / npos
    grad = np.where(pos, d_pos, d_neg) * inside / np.expand_dims(npos, axes)
    return loss, grad


def focal_loss(pred, target):
    return float(focal_loss_grad(pred, target)[0])


# ---------------------------------------------------------------- GIoU

def giou_grad(pred, gt):
    """``1 - GIoU`` for center-size boxes [..., 4] and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64) if not isinstance(pred, np.ndarray) else pred
    gt = np.asarray(gt, dtype=pred.dtype)
    if np.any(gt[..., 2] * gt[..., 3] <= 0):
        raise DomainError("ground-truth box has zero area")
    cx, cy, w, h = (pred[..., k] for k in range(4))
    gx1 = gt[..., 0] - gt[..., 2] / 2
    gx2 = gt[..., 0] + gt[..., 2] / 2
    gy1 = gt[..., 1] - gt[..., 3] / 2
    gy2 = gt[..., 1] + gt[..., 3] / 2
    px1, px2 = cx - w / 2, cx + w / 2
    py1, py2 = cy - h / 2, cy + h / 2

    iw_raw = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    ih_raw = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    iw, ih = np.maximum(iw_raw, 0), np.maximum(ih_raw, 0)
    inter = iw * ih
    area_p, area_g = w * h, gt[..., 2] * gt[..., 3]
    union = area_p + area_g - inter
    ew = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    eh = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    encl = ew * eh
    loss = 2.0 - inter / union - union / encl

    d_union = inter / union ** 2 - 1.0 / encl
    d_inter = -1.0 / union - d_union
    d_encl = union / encl ** 2
    d_iw = d_inter * ih * (iw_raw > 0)
    d_ih = d_inter * iw * (ih_raw > 0)
    # d/d corners of the prediction
    d_px1 = -d_iw * (px1 >= gx1) - d_encl * eh * (px1 <= gx1)
    d_px2 = d_iw * (px2 <= gx2) + d_encl * eh * (px2 >= gx2)
    d_py1 = -d_ih * (py1 >= gy1) - d_encl * ew * (py1 <= gy1)
    d_py2 = d_ih * (py2 <= gy2) + d_encl * ew * (py2 >= gy2)
    grad = np.stack([
        d_px1 + d_px2,
        d_py1 + d_py2,
        (d_px2 - d_px1) / 2 + d_union * h,
        (d_py2 - d_py1) / 2 + d_union * w,
    ], axis=-1)
    return loss, grad


def giou_loss(pred, gt):
    return float(giou_grad(_boxes(pred), _boxes(gt))[0])


def box_iou(a, b):
    """IoU of center-size boxes [..., 4]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[..., 0] + a[..., 2] / 2, b[..., 0] + b[..., 2] / 2) - \
        np.maximum(a[..., 0] - a[..., 2] / 2, b[..., 0] - b[..., 2] / 2)
    ih = np.minimum(a[..., 1] + a[..., 3] / 2, b[..., 1] + b[..., 3] / 2) - \
        np.maximum(a[..., 1] - a[..., 3] / 2, b[..., 1] - b[..., 3] / 2)
    inter = np.maximum(iw, 0) * np.maximum(ih, 0)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# ---------------------------------------------------------------- combined

def l1_loss_grad(pred, gt):
    diff = pred - gt
    return np.abs(diff).mean(axis=-1), np.sign(diff) / pred.shape[-1]


def total_loss(cls_pred, cls_target, pred, gt, weights=LossWeights()):
    """Weighted sum of focal, L1 and GIoU terms for a single sample."""
    focal = focal_loss(cls_pred, cls_target)
    p, g = _boxes(pred), _boxes(gt)
    l1 = float(np.abs(p - g).mean())
    giou = giou_loss(p, g)
    return weights.focal * focal + weights.l1 * l1 + weights.giou * giou


def combine(components, weights=LossWeights()):
    focal, l1, giou = components
    return weights.focal * focal + weights.l1 * l1 + weights.giou * giou


def tracking_loss(out, gt_boxes, weights=LossWeights()):
    """Batch loss and gradients w.r.t. the head's three probability maps.

    The box terms read offset and size at the ground-truth center cell.
    Returns ``(loss, (g_cls, g_offset, g_size), components)`` with batch-mean
    components ``(focal, l1, giou)``.
    """
    gt = np.asarray(gt_boxes, dtype=np.float64)
    nb, s = out.cls.shape[0], out.cls.shape[-1]
    dtype = out.cls.dtype
    targets = np.stack([make_cls_target(g, s) for g in gt]).astype(dtype)
    focal, g_focal = focal_loss_grad(out.cls, targets)

    ii, jj = gt_cell(gt, s)
    bidx = np.arange(nb)
    off = out.offset[bidx, ii, jj].astype(np.float64)
    size = out.size[bidx, ii, jj].astype(np.float64)
    pred = np.stack([(jj + off[:, 0]) / s, (ii + off[:, 1]) / s, size[:, 0], size[:, 1]], axis=-1)
    l1, g_l1 = l1_loss_grad(pred, gt)
    giou, g_giou = giou_grad(pred, gt)

    g_box = (weights.l1 * g_l1 + weights.giou * g_giou) / nb
    g_cls = (weights.focal * g_focal / nb).astype(dtype)
    g_off = np.zeros_like(out.offset)
    g_size = np.zeros_like(out.size)
    g_off[bidx, ii, jj] = g_box[:, :2] / s
    g_size[bidx, ii, jj] = g_box[:, 2:]
    comps = (float(focal.mean()), float(l1.mean()), float(giou.mean()))
    return combine(comps, weights), (g_cls, g_off, g_size), comps
