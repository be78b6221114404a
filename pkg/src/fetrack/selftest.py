"""Fast invariant suite behind ``fetrack selftest``. Everything runs in 64-bit."""
from __future__ import annotations

import math
import traceback

import numpy as np

from . import blocks
from .events import EventStream, ExposureWindow, crop_patch, stack_events_to_frame
from .numerics import Rng, finite_diff_grad
from .ssm import ScanInputs, SsmParams, selective_scan_backward, selective_scan_parallel, selective_scan_seq
from .ssm.zoh import phi_np
from .tracker import bench
from .tracker.losses import BBox, LossWeights, decode_bbox, focal_loss, giou_loss, total_loss
from .tracker.head import ScoreMapOutput
from .tracker.metrics import eval_boxes
from .tracker.model import TOY, init_model


class CheckFailed(Exception):
    pass


def _expect(cond, msg="check failed"):
    # explicit, so the suite still checks under ``python -O``
    if not cond:
        raise CheckFailed(msg)


def _rel(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def _random_scan(rng, L=12, D=3, N=4):
    params = SsmParams(A_log=rng.normal((D, N), 0.5), D_skip=rng.normal(D))
    inputs = ScanInputs(rng.normal((L, D)), rng.normal((L, N)), rng.normal((L, N)),
                        np.exp(rng.normal((L, D), 0.5)) * 0.3)
    return params, inputs


def dense_scan(params, inputs):
    """Unrolled reference: h_t = diag(exp(dA)) h + dphi(dA) B x, one channel at a time."""
    A = -np.exp(params.A_log)
    L, D = inputs.x_prime.shape
    y = np.zeros((L, D))
    for d in range(D):
        h = np.zeros(A.shape[1])
        for t in range(L):
            u = inputs.delta[t, d] * A[d]
            h = np.exp(u) * h + inputs.delta[t, d] * phi_np(u) * inputs.B_t[t] * inputs.x_prime[t, d]
            y[t, d] = inputs.C_t[t] @ h + params.D_skip[d] * inputs.x_prime[t, d]
    return y


def check_scan_forms():
    rng = Rng(1)
    for _ in range(5):
        p, x = _random_scan(rng)
        ys = selective_scan_seq(p, x).y
        yp = selective_scan_parallel(p, x).y
        yd = dense_scan(p, x)
        _expect(_rel(ys, yd) < 1e-12 and _rel(yp, yd) < 1e-12, "scan forms disagree")


def check_zoh():
    # phi(-1) = 1 - 1/e
    _expect(abs(phi_np(-1.0) - (1 - math.exp(-1))) < 1e-15)
    _expect(abs(phi_np(-1e-9) - (1 - 5e-10)) < 1e-15)


def check_scan_gradient():
    rng = Rng(2)
    p, x = _random_scan(rng, L=6, D=2, N=3)
    gy = rng.normal(x.x_prime.shape)
    g = selective_scan_backward(p, x, gy)
    arrays = {"x_prime": x.x_prime, "B_t": x.B_t, "C_t": x.C_t, "delta": x.delta,
              "A_log": p.A_log, "D_skip": p.D_skip}

    def loss(name, v):
        a = dict(arrays, **{name: v})
        params = SsmParams(a.pop("A_log"), a.pop("D_skip"))
        return float((selective_scan_seq(params, ScanInputs(**a)).y * gy).sum())

    for name, x0 in arrays.items():
        num = finite_diff_grad(lambda v: loss(name, v), x0, h=1e-6)
        err = _rel(getattr(g, name), num)
        _expect(err < 1e-6, f"scan gradient {name} off by {err:.2e}")


def check_identities():
    rng = Rng(3)
    C = 8
    h = rng.normal((2, 10, C))
    blk = {k: np.zeros_like(v) for k, v in blocks.init_vim_block(rng, C, 4, 4, 2, 1, np.float64).items()}
    out, _ = blocks.vim_block_fwd(h, blk)
    _expect(np.array_equal(out, h), "zero-weight Vim block is not the identity")
    fus = {k: np.zeros_like(v) for k, v in blocks.init_fusion(rng, C, 4, 4, 2, 1, np.float64).items()}
    g = rng.normal((2, 10, C))
    (a, b), _ = blocks.fusion_fwd(h, g, fus)
    _expect(np.array_equal(a, h) and np.array_equal(b, g), "zero-weight fusion block is not the identity")


def check_losses():
    _expect(giou_loss(BBox(0, 0, 1, 1), BBox(0, 0, 1, 1)) == 0.0)
    _expect(abs(giou_loss(BBox(0, 0, 1, 1), BBox(1, 0, 1, 1)) - 1.0) < 1e-12)
    _expect(abs(giou_loss(BBox(0, 0, 1, 1), BBox(2, 0, 1, 1)) - 4.0 / 3.0) < 1e-12)
    target = np.zeros((4, 4))
    target[1, 2] = 1.0
    _expect(focal_loss(target.copy(), target) <= 1e-5)
    w = LossWeights()
    gt = BBox(0.5, 0.5, 0.2, 0.2)
    _expect(total_loss(target, target, gt, gt, w) <= 1e-5 * w.focal)
    out = ScoreMapOutput(np.zeros((16, 16)), np.zeros((16, 16, 2)), np.full((16, 16, 2), 0.25))
    out.cls[4, 7] = 1.0
    b = decode_bbox(out)
    _expect((b.cx, b.cy, b.w, b.h) == (0.4375, 0.25, 0.25, 0.25))


def check_metrics():
    gt = np.tile([50.0, 50.0, 20.0, 20.0], (4, 1))
    m = eval_boxes(gt, gt)
    _expect((m.sr, m.pr, m.npr) == (100.0, 100.0, 100.0))
    pred = gt.copy()
    pred[:2, 0] += 10
    pred[2:, 0] += 30
    _expect(eval_boxes(pred, gt).pr == 50.0)


def check_events():
    s = EventStream([0, 1, 2, 3], [3, 1, 1, 1], [5, 2, 2, 2], [1, -1, -1, -1], (8, 8), 10)
    img = stack_events_to_frame(s, ExposureWindow(0, 10))
    _expect(img[5, 3, 0] == 160 and img[2, 1, 0] == 64 and (img == 128).sum() == 3 * 62)
    frame = np.full((8, 8, 3), 7.0)
    _expect(np.all(crop_patch(frame, (1.0, 6.0, 2.0, 3.0), 2.0, 5) == 7.0))


def check_bench():
    m = init_model(TOY, 0, np.float64)
    _expect(bench.count_params(m) == sum(v.size for v in m.params.values()))
    a = bench.flops_breakdown(TOY.with_depth(2))
    b = bench.flops_breakdown(TOY.with_depth(4))
    _expect(b["backbone"] == 2 * a["backbone"])


CHECKS = [
    ("scan forms agree", check_scan_forms),
    ("zoh closed form", check_zoh),
    ("scan gradient", check_scan_gradient),
    ("residual identities", check_identities),
    ("loss contracts", check_losses),
    ("metric contracts", check_metrics),
    ("event image and crop", check_events),
    ("parameter and flop audit", check_bench),
]


def run_selftest(workers=1):
    """Yields ``(name, passed, detail)`` for every check."""
    for name, fn in CHECKS:
        try:
            fn()
            yield name, True, ""
        except CheckFailed as e:
            yield name, False, str(e) or "assertion failed"
        except Exception as e:  # noqa: BLE001 - report, do not crash the suite
            yield name, False, "".join(traceback.format_exception_only(type(e), e)).strip()
