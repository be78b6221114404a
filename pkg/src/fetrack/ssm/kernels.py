"""Selective-scan kernels.

Layout for every kernel (one batch of independent sequences):

    xp, dt : [B, L, D]   post-conv activation and time scale
    Bm, Cm : [B, L, N]   input-dependent projections
    A      : [D, N]      diagonal state matrix (negative)
    Dskip  : [D]         feed-through term

Each kernel exists twice: a numba version (``*_nb``) and a numpy version
(``*_np``). The un-suffixed names dispatch on ``USE_NUMBA``.
"""
import math

import numpy as np

from .._accel import USE_NUMBA, njit, prange
from .zoh import DPHI_TAYLOR, PHI_TAYLOR, dphi, dphi_np, phi_np

# Backward recomputes hidden states segment by segment above this length.
SEGMENT = 512
# Reassociation lets LLVM vectorize the short state-axis loops. NaN and inf
# semantics are kept, so non-finite inputs still propagate.
FAST = {"reassoc"}


# ---------------------------------------------------------------- numba
#
# The numba kernels take ``em1 = expm1(dt * A)`` [B, L, D, N], computed once
# with numpy's vectorized expm1; A_bar = 1 + em1 and the exact-ZOH factor
# em1 / u then need no transcendental calls inside the recurrence.

@njit(fastmath=FAST)
def _zoh_factor(u, e, exact):
    if not exact:
        return 1.0
    if abs(u) < PHI_TAYLOR:
        return 1.0 + u * (0.5 + u * (1.0 / 6.0 + u * (1.0 / 24.0)))
    return e / u


@njit(fastmath=FAST)
def _zoh_factors(u, e):
    """(expm1(u)/u, its derivative) sharing one reciprocal."""
    if abs(u) < DPHI_TAYLOR:
        return _zoh_factor(u, e, True), dphi(u)
    iu = 1.0 / u
    p = e * iu
    return p, (1.0 + (u - 1.0) * p) * iu


@njit(fastmath=FAST)
def _forward_step(b, t, xp, dt, A, Bm, em1, exact, hprev, hout):
    """h_t = A_bar h_{t-1} + B_bar x_t for one token; ``hout`` may alias ``hprev``."""
    D, N = A.shape
    for d in range(D):
        delta = dt[b, t, d]
        x = xp[b, t, d]
        for n in range(N):
            e = em1[b, t, d, n]
            f = delta * _zoh_factor(delta * A[d, n], e, exact)
            hout[d, n] = (1.0 + e) * hprev[d, n] + f * Bm[b, t, n] * x


@njit(parallel=True, fastmath=FAST)
def scan_fwd_nb(xp, dt, A, Bm, Cm, Dskip, em1, exact, states):
    nb, L, D = xp.shape
    N = A.shape[1]
    y = np.empty_like(xp)
    h_last = np.zeros((nb, D, N), dtype=xp.dtype)
    keep = states.shape[0] == nb
    for b in prange(nb):
        h = np.zeros((D, N), dtype=xp.dtype)
        for t in range(L):
            hout = states[b, t] if keep else h
            _forward_step(b, t, xp, dt, A, Bm, em1, exact, h, hout)
            for d in range(D):
                acc = Dskip[d] * xp[b, t, d]
                for n in range(N):
                    acc += Cm[b, t, n] * hout[d, n]
                y[b, t, d] = acc
            h = hout
        h_last[b] = h
    return y, h_last


@njit(fastmath=FAST)
def _reverse_step(b, t, xp, dt, A, Bm, Cm, Dskip, em1, gy, exact, hcur, hprev, gh, dA, dD,
                  dxp, ddt, dBm, dCm, accB, accC):
    """One reverse time step; ``gh`` carries dL/dh_t and is updated to dL/dh_{t-1}."""
    D, N = A.shape
    for n in range(N):
        accB[n] = 0.0
        accC[n] = 0.0
    for d in range(D):
        g = float(gy[b, t, d])
        x = float(xp[b, t, d])
        delta = float(dt[b, t, d])
        dD[d] += g * x
        dx = Dskip[d] * g
        ddelta = 0.0
        for n in range(N):
            a = float(A[d, n])
            u = delta * a
            e = float(em1[b, t, d, n])
            ab = 1.0 + e
            bm = float(Bm[b, t, n])
            accC[n] += g * hcur[d, n]
            ght = gh[d, n] + Cm[b, t, n] * g
            dab = ght * hprev[d, n]
            dbb = ght * x
            if exact:
                p, dp = _zoh_factors(u, e)
                f = delta * p
                # d(delta * phi(delta * a)) / d delta = exp(delta * a)
                ddelta += (dab * a + dbb * bm) * ab
                dA[d, n] += dab * ab * delta + dbb * bm * delta * delta * dp
            else:
                f = delta
                ddelta += dab * ab * a + dbb * bm
                dA[d, n] += dab * ab * delta
            dx += ght * f * bm
            accB[n] += dbb * f
            gh[d, n] = ght * ab
        dxp[b, t, d] = dx
        ddt[b, t, d] = ddelta
    for n in range(N):
        dBm[b, t, n] = accB[n]
        dCm[b, t, n] = accC[n]


@njit(parallel=True, fastmath=FAST)
def scan_bwd_nb(xp, dt, A, Bm, Cm, Dskip, em1, gy, exact, segment, states):
    """Reverse recurrence. ``states`` [B, L, D, N] from the forward pass skips
    the recomputation; pass an empty array to recompute (checkpointed)."""
    nb, L, D = xp.shape
    N = A.shape[1]
    dxp = np.empty_like(xp)
    ddt = np.empty_like(xp)
    dBm = np.empty_like(Bm)
    dCm = np.empty_like(Cm)
    dA_b = np.zeros((nb, D, N))
    dD_b = np.zeros((nb, D))
    keep = states.shape[0] == nb
    seg = min(L, segment)
    nseg = (L + seg - 1) // seg
    for b in prange(nb):
        gh = np.zeros((D, N))
        accB = np.empty(N)
        accC = np.empty(N)
        if keep:
            zero = np.zeros((D, N), dtype=xp.dtype)
            for t in range(L - 1, -1, -1):
                hprev = states[b, t - 1] if t > 0 else zero
                _reverse_step(b, t, xp, dt, A, Bm, Cm, Dskip, em1, gy, exact, states[b, t], hprev,
                              gh, dA_b[b], dD_b[b], dxp, ddt, dBm, dCm, accB, accC)
            continue
        # hidden state at the start of each segment
        ck = np.zeros((nseg, D, N), dtype=xp.dtype)
        h = np.zeros((D, N), dtype=xp.dtype)
        for t in range(L if nseg > 1 else 0):
            if t % seg == 0:
                ck[t // seg] = h
            _forward_step(b, t, xp, dt, A, Bm, em1, exact, h, h)
        # states within a segment; slot 0 holds the entry state
        hs = np.empty((seg + 1, D, N), dtype=xp.dtype)
        for s in range(nseg - 1, -1, -1):
            t0 = s * seg
            t1 = min(L, t0 + seg)
            hs[0] = ck[s]
            for t in range(t0, t1):
                _forward_step(b, t, xp, dt, A, Bm, em1, exact, hs[t - t0], hs[t - t0 + 1])
            for t in range(t1 - 1, t0 - 1, -1):
                _reverse_step(b, t, xp, dt, A, Bm, Cm, Dskip, em1, gy, exact, hs[t - t0 + 1], hs[t - t0],
                              gh, dA_b[b], dD_b[b], dxp, ddt, dBm, dCm, accB, accC)
    return dxp, ddt, dA_b.sum(axis=0).astype(xp.dtype), dBm, dCm, dD_b.sum(axis=0).astype(xp.dtype)


@njit(parallel=True, fastmath=FAST)
def scan_parallel_nb(xp, dt, A, Bm, Cm, Dskip, em1, exact):
    """Blelloch (work-efficient) prefix scan per (batch, channel, state) lane."""
    nb, L, D = xp.shape
    N = A.shape[1]
    P = 1
    while P < L:
        P *= 2
    y = np.empty_like(xp)
    h_last = np.zeros((nb, D, N), dtype=xp.dtype)
    for b in prange(nb):
        ea = np.empty(P, dtype=xp.dtype)
        eb = np.empty(P, dtype=xp.dtype)
        sa = np.empty(P, dtype=xp.dtype)
        sb = np.empty(P, dtype=xp.dtype)
        hs = np.empty((L, D, N), dtype=xp.dtype)
        for d in range(D):
            for n in range(N):
                for t in range(P):
                    if t < L:
                        delta = dt[b, t, d]
                        e = em1[b, t, d, n]
                        f = delta * _zoh_factor(delta * A[d, n], e, exact)
                        ea[t] = 1.0 + e
                        eb[t] = f * Bm[b, t, n] * xp[b, t, d]
                    else:
                        ea[t] = 1.0
                        eb[t] = 0.0
                    sa[t] = ea[t]
                    sb[t] = eb[t]
                # up-sweep
                stride = 1
                while stride < P:
                    i = 2 * stride - 1
                    while i < P:
                        j = i - stride
                        sb[i] = sa[i] * sb[j] + sb[i]
                        sa[i] = sa[i] * sa[j]
                        i += 2 * stride
                    stride *= 2
                # down-sweep (exclusive prefixes)
                sa[P - 1] = 1.0
                sb[P - 1] = 0.0
                stride = P // 2
                while stride >= 1:
                    i = 2 * stride - 1
                    while i < P:
                        j = i - stride
                        ta = sa[j]
                        tb = sb[j]
                        sa[j] = sa[i]
                        sb[j] = sb[i]
                        sb[i] = ta * sb[i] + tb
                        sa[i] = ta * sa[i]
                        i += 2 * stride
                    stride //= 2
                for t in range(L):
                    hs[t, d, n] = ea[t] * sb[t] + eb[t]
                h_last[b, d, n] = hs[L - 1, d, n]
        for t in range(L):
            for d in range(D):
                acc = Dskip[d] * xp[b, t, d]
                for n in range(N):
                    acc += Cm[b, t, n] * hs[t, d, n]
                y[b, t, d] = acc
    return y, h_last


# ---------------------------------------------------------------- numpy

def _discretize_np(xp, dt, A, Bm, exact):
    u = dt[..., None] * A
    ab = np.exp(u)
    if exact:
        f = dt[..., None] * phi_np(u)
    else:
        f = np.broadcast_to(dt[..., None], u.shape)
    return u, ab, f


def scan_fwd_np(xp, dt, A, Bm, Cm, Dskip, exact, keep_states=False):
    nb, L, D = xp.shape
    _, ab, f = _discretize_np(xp, dt, A, Bm, exact)
    bx = f * Bm[:, :, None, :] * xp[..., None]
    h = np.zeros((nb, D, A.shape[1]), dtype=xp.dtype)
    y = np.empty_like(xp)
    states = np.empty(bx.shape, xp.dtype) if keep_states else None
    for t in range(L):
        h = ab[:, t] * h + bx[:, t]
        if keep_states:
            states[:, t] = h
        y[:, t] = np.einsum("bdn,bn->bd", h, Cm[:, t]) + Dskip * xp[:, t]
    return y, h, states


def scan_bwd_np(xp, dt, A, Bm, Cm, Dskip, gy, exact, segment, states=None):
    nb, L, D = xp.shape
    N = A.shape[1]
    u, ab, f = _discretize_np(xp, dt, A, Bm, exact)
    bx = f * Bm[:, :, None, :] * xp[..., None]
    seg = L if states is not None else min(L, segment)
    nseg = (L + seg - 1) // seg
    ck = np.zeros((nseg, nb, D, N), dtype=xp.dtype)
    h = np.zeros((nb, D, N), dtype=xp.dtype)
    for t in range(L if nseg > 1 else 0):
        if t % seg == 0:
            ck[t // seg] = h
        h = ab[:, t] * h + bx[:, t]
    # dL/dh_t, carried backwards; hs_prev[t] = h_{t-1}
    gh_all = np.empty((nb, L, D, N), dtype=xp.dtype)
    hprev_all = np.empty((nb, L, D, N), dtype=xp.dtype)
    dCm = np.empty_like(Cm)
    gh = np.zeros((nb, D, N), dtype=xp.dtype)
    for s in range(nseg - 1, -1, -1):
        t0, t1 = s * seg, min(L, s * seg + seg)
        hs = np.empty((t1 - t0 + 1, nb, D, N), dtype=xp.dtype)
        hs[0] = ck[s]
        if states is not None:
            hs[1:] = np.moveaxis(states, 1, 0)
        else:
            for t in range(t0, t1):
                hs[t - t0 + 1] = ab[:, t] * hs[t - t0] + bx[:, t]
        for t in range(t1 - 1, t0 - 1, -1):
            g = gy[:, t]
            dCm[:, t] = np.einsum("bd,bdn->bn", g, hs[t - t0 + 1])
            gh = gh + Cm[:, t, None, :] * g[:, :, None]
            gh_all[:, t] = gh
            hprev_all[:, t] = hs[t - t0]
            gh = gh * ab[:, t]
    dab = gh_all * hprev_all
    dbb = gh_all * xp[..., None]
    Bexp = Bm[:, :, None, :]
    dxp = Dskip * gy + (gh_all * f * Bexp).sum(-1)
    dBm = (dbb * f).sum(axis=2)
    if exact:
        df_ddelta = ab
        df_da = dt[..., None] ** 2 * dphi_np(u)
        ddt = (dab * ab * A + dbb * Bexp * df_ddelta).sum(-1)
        dA = (dab * ab * dt[..., None] + dbb * Bexp * df_da).sum(axis=(0, 1))
    else:
        ddt = (dab * ab * A + dbb * Bexp).sum(-1)
        dA = (dab * ab * dt[..., None]).sum(axis=(0, 1))
    dD = (gy * xp).sum(axis=(0, 1))
    return dxp, ddt, dA, dBm, dCm, dD


def _combine(a2, b2, a1, b1):
    """(a2, b2) after (a1, b1): h -> a2 * (a1 * h + b1) + b2."""
    return a2 * a1, a2 * b1 + b2


def scan_parallel_np(xp, dt, A, Bm, Cm, Dskip, exact):
    """Blelloch scan along the time axis, vectorized over all lanes per tree level."""
    nb, L, D = xp.shape
    N = A.shape[1]
    _, ab, f = _discretize_np(xp, dt, A, Bm, exact)
    bx = f * Bm[:, :, None, :] * xp[..., None]
    P = 1
    while P < L:
        P *= 2
    sa = np.ones((nb, P, D, N), dtype=xp.dtype)
    sb = np.zeros((nb, P, D, N), dtype=xp.dtype)
    sa[:, :L] = ab
    sb[:, :L] = bx
    stride = 1
    while stride < P:
        right = slice(2 * stride - 1, P, 2 * stride)
        left = slice(stride - 1, P, 2 * stride)
        sa[:, right], sb[:, right] = _combine(sa[:, right], sb[:, right], sa[:, left], sb[:, left])
        stride *= 2
    sa[:, P - 1] = 1.0
    sb[:, P - 1] = 0.0
    stride = P // 2
    while stride >= 1:
        right = slice(2 * stride - 1, P, 2 * stride)
        left = slice(stride - 1, P, 2 * stride)
        ta, tb = sa[:, left].copy(), sb[:, left].copy()
        sa[:, left], sb[:, left] = sa[:, right], sb[:, right]
        sa[:, right], sb[:, right] = _combine(ta, tb, sa[:, right], sb[:, right])
        stride //= 2
    hs = ab * sb[:, :L] + bx
    y = np.einsum("bldn,bln->bld", hs, Cm) + Dskip * xp
    return y, hs[:, L - 1].copy()


# ---------------------------------------------------------------- dispatch

def _contig(*arrays):
    return tuple(np.ascontiguousarray(a) for a in arrays)


@njit
def _outer_da(dt, A):
    nb, L, D = dt.shape
    N = A.shape[1]
    u = np.empty((nb, L, D, N), dtype=dt.dtype)
    for b in range(nb):
        for t in range(L):
            for d in range(D):
                for n in range(N):
                    u[b, t, d, n] = dt[b, t, d] * A[d, n]
    return u


def _em1(dt, A):
    # broadcasting onto a short last axis is slow in numpy; the vectorized
    # expm1 is much faster than the scalar libm call inside the kernels
    u = _outer_da(dt, A)
    return np.expm1(u, out=u)


def _no_states(dtype):
    return np.empty((0, 0, 0, 0), dtype=dtype)


def scan_fwd(xp, dt, A, Bm, Cm, Dskip, exact, use_numba=None, keep_states=False):
    """Returns ``(y, h_last)``, or ``(y, h_last, states)`` with ``keep_states``."""
    use_numba = USE_NUMBA if use_numba is None else use_numba
    args = _contig(xp, dt, A, Bm, Cm, Dskip)
    if use_numba:
        nb, L, D = xp.shape
        states = np.empty((nb, L, D, A.shape[1]), xp.dtype) if keep_states else _no_states(xp.dtype)
        y, h = scan_fwd_nb(*args, _em1(dt, A), bool(exact), states)
    else:
        y, h, states = scan_fwd_np(*args, bool(exact), keep_states)
    return (y, h, states) if keep_states else (y, h)


def scan_bwd(xp, dt, A, Bm, Cm, Dskip, gy, exact, segment=SEGMENT, use_numba=None, states=None):
    use_numba = USE_NUMBA if use_numba is None else use_numba
    if use_numba:
        args = _contig(xp, dt, A, Bm, Cm, Dskip)
        st = _no_states(xp.dtype) if states is None else np.ascontiguousarray(states, dtype=xp.dtype)
        return scan_bwd_nb(*args, _em1(dt, A), np.ascontiguousarray(gy), bool(exact), int(segment), st)
    args = _contig(xp, dt, A, Bm, Cm, Dskip, gy)
    return scan_bwd_np(*args, bool(exact), int(segment), states)


def scan_parallel(xp, dt, A, Bm, Cm, Dskip, exact, use_numba=None):
    use_numba = USE_NUMBA if use_numba is None else use_numba
    args = _contig(xp, dt, A, Bm, Cm, Dskip)
    if use_numba:
        return scan_parallel_nb(*args, _em1(dt, A), bool(exact))
    return scan_parallel_np(*args, bool(exact))
