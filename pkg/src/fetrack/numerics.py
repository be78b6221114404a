"""Dense-array math layer.

Every op works on plain ``numpy.ndarray`` and keeps the dtype of its input, so
the same code runs in float32 (training/inference) and float64 (gradient and
oracle checks). Ops that need a backward pass come in ``*_fwd`` / ``*_bwd``
pairs; the forward returns ``(out, cache)``.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, DomainError, NumericError

RUNTIME_DTYPE = np.float32
CHECK_DTYPE = np.float64


def dtype_for(precision: int):
    if precision == 32:
        return np.float32
    if precision == 64:
        return np.float64
    raise DomainError(f"precision must be 32 or 64, got {precision}")


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------- activations

def sigmoid(x):
    # exp(-x) overflows to inf for very negative x, giving the correct 0;
    # a few times faster than scipy's expit and equally accurate in the tails
    with np.errstate(over="ignore"):
        e = np.exp(np.negative(x))
    if np.ndim(e) == 0:
        return 1.0 / (1.0 + e)
    e += 1.0
    return np.reciprocal(e, out=e)


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softplus(x):
    r = np.exp(-np.abs(x))
    np.log1p(r, out=r)
    r += np.maximum(x, 0)
    return r


# ---------------------------------------------------------------- linear maps

def linear(x, w, b=None):
    out = x @ w
    if b is not None:
        out = out + b
    return out


def linear_bwd(x, w, gout, has_bias=True):
    """Gradients of ``x @ w + b`` with respect to x, w and b."""
    gx = gout @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    g2 = gout.reshape(-1, gout.shape[-1])
    gw = x2.T @ g2
    gb = g2.sum(axis=0) if has_bias else None
    return gx, gw, gb


# ---------------------------------------------------------------- layer norm

def layer_norm(x, scale, bias, eps=1e-5):
    return layer_norm_fwd(x, scale, bias, eps)[0]


def layer_norm_fwd(x, scale, bias, eps=1e-5):
    c = x.shape[-1]
    if scale.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm affine length {scale.shape}/{bias.shape} != last axis {c}")
    if eps < 0:
        raise DomainError("eps must be non-negative")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * scale + bias, (xhat, rstd, scale)


def layer_norm_bwd(cache, gout):
    xhat, rstd, scale = cache
    lead = tuple(range(gout.ndim - 1))
    gscale = (gout * xhat).sum(axis=lead)
    gbias = gout.sum(axis=lead)
    gxhat = gout * scale
    gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                 - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
    return gx, gscale, gbias


# ---------------------------------------------------------------- convolutions

def _causal_pad(x, n):
    """Prepend ``n`` zero steps along the time axis (-2)."""
    shape = list(x.shape)
    shape[-2] += n
    xp = np.zeros(shape, dtype=x.dtype)
    xp[..., n:, :] = x
    return xp


def dw_conv1d(x, kernel):
    """Causal depth-wise convolution along the second-to-last axis.

    ``out[t, d] = sum_k kernel[k, d] * x[t - K + 1 + k, d]`` with zeros to the
    left, so the output keeps the input length.
    """
    if kernel.ndim != 2 or kernel.shape[1] != x.shape[-1]:
        raise DimensionError(f"kernel {kernel.shape} does not match {x.shape[-1]} channels")
    k = kernel.shape[0]
    if k < 1:
        raise DimensionError("kernel width must be >= 1")
    length = x.shape[-2]
    xp = _causal_pad(x, k - 1)
    out = np.zeros_like(x)
    for i in range(k):
        out += kernel[i] * xp[..., i:i + length, :]
    return out


def dw_conv1d_bwd(x, kernel, gout):
    k = kernel.shape[0]
    length = x.shape[-2]
    xp = _causal_pad(x, k - 1)
    gxp = np.zeros_like(xp)
    gk = np.empty_like(kernel)
    lead = tuple(range(x.ndim - 1))
    for i in range(k):
        gk[i] = (gout * xp[..., i:i + length, :]).sum(axis=lead)
        gxp[..., i:i + length, :] += kernel[i] * gout
    return gxp[..., k - 1:, :], gk


def _im2col3x3(x):
    b, h, w, c = x.shape
    # np.pad costs more than the copy itself at these sizes
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy * 3 + dx, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(b, h, w, 9 * c)


def conv3x3(x, w):
    """Same-padded 3x3 convolution. x: [B,H,W,Cin], w: [3,3,Cin,Cout]."""
    cols = _im2col3x3(x)
    return cols @ w.reshape(-1, w.shape[-1]), cols


def conv3x3_bwd(cols, x_shape, w, gout):
    b, h, wd, c = x_shape
    wm = w.reshape(-1, w.shape[-1])
    gw = (cols.reshape(-1, cols.shape[-1]).T @ gout.reshape(-1, gout.shape[-1])).reshape(w.shape)
    gcols = (gout @ wm.T).reshape(b, h, wd, 9, c)
    gxp = np.zeros((b, h + 2, wd + 2, c), dtype=gout.dtype)
    for dy in range(3):
        for dx in range(3):
            gxp[:, dy:dy + h, dx:dx + wd, :] += gcols[:, :, :, dy * 3 + dx, :]
    return gxp[:, 1:-1, 1:-1, :], gw


# ---------------------------------------------------------------- batch norm

def batch_norm_fwd(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Channel-last batch norm. In train mode the running buffers are updated in place."""
    axes = tuple(range(x.ndim - 1))
    if train:
        mu = x.mean(axis=axes)
        xc = x - mu
        var = (xc * xc).mean(axis=axes)
        n = x.size // x.shape[-1]
        unbiased = var * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
        xc = x - mu
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma, train)


def batch_norm_bwd(cache, gout):
    xhat, rstd, gamma, train = cache
    axes = tuple(range(gout.ndim - 1))
    ggamma = (gout * xhat).sum(axis=axes)
    gbeta = gout.sum(axis=axes)
    gxhat = gout * gamma
    if train:
        gx = rstd * (gxhat - gxhat.mean(axis=axes) - xhat * (gxhat * xhat).mean(axis=axes))
    else:
        gx = gxhat * rstd
    return gx, ggamma, gbeta


# ---------------------------------------------------------------- RNG

class Rng:
    """Seeded counter-based generator (Philox).

    ``child(k)`` derives an independent stream from ``(seed, k)`` without
    touching this generator's state, so per-sequence or per-worker streams do
    not depend on scheduling.
    """

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, k: int) -> "Rng":
        return Rng(self.seed, self.key + (int(k),))

    def normal(self, size=None, std=1.0, dtype=np.float64):
        return (self.gen.standard_normal(size) * std).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)


# ---------------------------------------------------------------- gradient oracle

def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5, index=None):
    """Central-difference gradient of a scalar function, in float64.

    ``index`` optionally restricts evaluation to a list of flat indices; the
    other entries of the result are left at zero.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    idx = range(flat.size) if index is None else index
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("function not finite under perturbation", step=int(i))
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
