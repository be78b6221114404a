"""Public selective-scan API: sequential, parallel and backward forms."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import DimensionError, DomainError, NumericError
from . import kernels
from .zoh import EXACT, check_mode


@dataclass
class SsmParams:
    """Per-path selective-SSM parameters.

    Only ``A_log`` and ``D_skip`` enter the scan itself; the remaining fields
    are the projections that produce the scan inputs and are used by the
    token blocks.
    """

    A_log: np.ndarray  # [D, N], A = -exp(A_log)
    D_skip: np.ndarray  # [D]
    conv_kernel: Optional[np.ndarray] = None  # [K, D]
    proj_bcdt: Optional[np.ndarray] = None  # [D, R + 2N]
    dt_proj: Optional[np.ndarray] = None  # [R, D]
    dt_bias: Optional[np.ndarray] = None  # [D]

    @property
    def A(self):
        return -np.exp(self.A_log)


@dataclass
class ScanInputs:
    x_prime: np.ndarray  # [L, D] or [B, L, D]
    B_t: np.ndarray  # [L, N] or [B, L, N]
    C_t: np.ndarray  # [L, N] or [B, L, N]
    delta: np.ndarray  # [L, D] or [B, L, D], strictly positive


@dataclass
class ScanOutput:
    y: np.ndarray
    h_last: np.ndarray
    states: Optional[np.ndarray] = None  # every h_t, [B, L, D, N], when requested


@dataclass
class ScanGrads:
    x_prime: np.ndarray
    B_t: np.ndarray
    C_t: np.ndarray
    delta: np.ndarray
    A_log: np.ndarray
    D_skip: np.ndarray


def _prepare(params: SsmParams, inputs: ScanInputs):
    xp, Bm, Cm, dt = (np.asarray(a) for a in (inputs.x_prime, inputs.B_t, inputs.C_t, inputs.delta))
    batched = xp.ndim == 3
    if not batched:
        xp, Bm, Cm, dt = xp[None], Bm[None], Cm[None], dt[None]
    if xp.ndim != 3 or Bm.ndim != 3 or Cm.ndim != 3 or dt.ndim != 3:
        raise DimensionError("scan inputs must all be [L, .] or all be [B, L, .]")
    nb, L, D = xp.shape
    A_log = np.asarray(params.A_log)
    if A_log.ndim != 2 or A_log.shape[0] != D:
        raise DimensionError(f"A_log {A_log.shape} does not match {D} channels")
    N = A_log.shape[1]
    if L < 1:
        raise DimensionError("sequence length must be >= 1")
    if dt.shape != (nb, L, D):
        raise DimensionError(f"delta {dt.shape} != x_prime {xp.shape}")
    if Bm.shape != (nb, L, N) or Cm.shape != (nb, L, N):
        raise DimensionError(f"B/C {Bm.shape}/{Cm.shape} != {(nb, L, N)}")
    if np.shape(params.D_skip) != (D,):
        raise DimensionError("D_skip must have one entry per channel")
    if np.any(dt <= 0):
        raise DomainError("delta must be strictly positive")
    dtype = np.result_type(xp, Bm, Cm, dt, A_log)
    cast = lambda a: np.ascontiguousarray(a, dtype=dtype)  # noqa: E731
    A = -np.exp(A_log.astype(dtype))
    return batched, cast(xp), cast(dt), A, cast(Bm), cast(Cm), cast(params.D_skip)


def _check_output(y, what):
    if not np.all(np.isfinite(y)):
        bad = np.argwhere(~np.isfinite(y))
        raise NumericError(f"non-finite value in {what}", step=int(bad[:, 1].min()))


def _unbatch(batched, y, h, states=None):
    if batched:
        return ScanOutput(y, h, states)
    return ScanOutput(y[0], h[0], None if states is None else states[0])


def selective_scan_seq(params: SsmParams, inputs: ScanInputs, mode=EXACT, use_numba=None,
                       keep_states=False) -> ScanOutput:
    """Sequential recurrence ``h_t = A_bar h_{t-1} + B_bar x_t``, ``y_t = C_t h_t + D x_t``.

    ``keep_states`` also returns every hidden state so the backward pass can
    skip recomputing them.
    """
    exact = check_mode(mode)
    batched, xp, dt, A, Bm, Cm, Ds = _prepare(params, inputs)
    res = kernels.scan_fwd(xp, dt, A, Bm, Cm, Ds, exact, use_numba=use_numba, keep_states=keep_states)
    _check_output(res[0], "selective scan output")
    return _unbatch(batched, *res)


def selective_scan_parallel(params: SsmParams, inputs: ScanInputs, mode=EXACT, workers=1,
                            use_numba=None) -> ScanOutput:
    """Same recurrence evaluated with a work-efficient prefix scan.

    ``workers > 1`` splits the batch across threads; lanes are independent so
    the result does not depend on the worker count.
    """
    exact = check_mode(mode)
    batched, xp, dt, A, Bm, Cm, Ds = _prepare(params, inputs)
    nb = xp.shape[0]
    workers = max(1, min(int(workers), nb))
    if workers == 1:
        y, h = kernels.scan_parallel(xp, dt, A, Bm, Cm, Ds, exact, use_numba=use_numba)
    else:
        chunks = np.array_split(np.arange(nb), workers)

        def run(idx):
            return kernels.scan_parallel(xp[idx], dt[idx], A, Bm[idx], Cm[idx], Ds, exact,
                                         use_numba=use_numba)

        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
        y = np.concatenate([p[0] for p in parts])
        h = np.concatenate([p[1] for p in parts])
    _check_output(y, "parallel selective scan output")
    return _unbatch(batched, y, h)


def selective_scan_backward(params: SsmParams, inputs: ScanInputs, grad_y, mode=EXACT,
                            segment=kernels.SEGMENT, use_numba=None, states=None) -> ScanGrads:
    """Reverse-time recurrence for all six gradient groups.

    Without ``states`` (from ``selective_scan_seq(..., keep_states=True)``)
    hidden states are recomputed from the zero initial state; sequences longer
    than ``segment`` are processed in checkpointed segments.
    """
    exact = check_mode(mode)
    batched, xp, dt, A, Bm, Cm, Ds = _prepare(params, inputs)
    gy = np.asarray(grad_y, dtype=xp.dtype)
    if not batched:
        gy = gy[None]
    if gy.shape != xp.shape:
        raise DimensionError(f"grad_y {gy.shape} != y {xp.shape}")
    if states is not None:
        states = np.asarray(states)
        if not batched:
            states = states[None]
        if states.shape != xp.shape + (A.shape[1],):
            raise DimensionError(f"states {states.shape} != {xp.shape + (A.shape[1],)}")
    dxp, ddt, dA, dBm, dCm, dD = kernels.scan_bwd(xp, dt, A, Bm, Cm, Ds, gy, exact, segment=segment,
                                                  use_numba=use_numba, states=states)
    dA_log = dA * A
    if not batched:
        dxp, ddt, dBm, dCm = dxp[0], ddt[0], dBm[0], dCm[0]
    return ScanGrads(dxp, dBm, dCm, ddt, dA_log, dD)
