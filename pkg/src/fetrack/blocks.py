"""Token-level building blocks with hand-written backward passes.

Parameters live in flat ``dict[str, ndarray]`` maps. Each block reads keys
relative to its own prefix (see :func:`subdict`) and returns gradients with
the same relative keys.

Vim block keys::

    norm.scale, norm.bias            layer norm over C
    proj_z.w/b, proj_x.w/b           C -> E
    fwd.*, bwd.*                     one SSM path per scan direction
    proj_out.w/b                     E -> C

SSM path keys: ``conv`` [K, E], ``proj_bcdt`` [E, R + 2N], ``dt_proj`` [R, E],
``dt_bias`` [E], ``A_log`` [E, N], ``D`` [E].

Fusion keys: ``rgb.*`` and ``event.*``, each with ``norm``, ``proj_x``,
``proj_z``, ``ssm.*`` and ``proj_out``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numerics import (dw_conv1d, dw_conv1d_bwd, layer_norm_bwd, layer_norm_fwd, linear, linear_bwd,
                       sigmoid, silu, silu_grad, softplus)
from .ssm import EXACT, ScanInputs, SsmParams, selective_scan_backward, selective_scan_seq

INIT_STD = 0.02


@dataclass
class TokenSeq:
    """Token batch ``[B, T, C]``; tokens ``[0, split)`` are template, the rest search."""

    data: np.ndarray
    split: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionError(f"TokenSeq data must be [B, T, C], got {self.data.shape}")
        n1, n2 = self.split, self.data.shape[1] - self.split
        if n1 < 1 or n2 < 1:
            raise DimensionError(f"template/search split {n1}/{n2} must both be >= 1")

    @property
    def template(self):
        return self.data[:, :self.split]

    @property
    def search(self):
        return self.data[:, self.split:]


@dataclass(frozen=True)
class BlockOptions:
    mode: str = EXACT
    d_skip: bool = True


DEFAULT_OPTIONS = BlockOptions()


def subdict(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def prefixed(grads, prefix):
    return {prefix + k: v for k, v in grads.items()}


# ---------------------------------------------------------------- init

def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


def init_ssm_path(rng, width, d_state, d_conv, dt_rank, dtype=np.float32):
    dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=width))
    a = np.geomspace(1.0, float(d_state), d_state)
    return {
        "conv": (rng.uniform(-1.0, 1.0, size=(d_conv, width)) / np.sqrt(d_conv)).astype(dtype),
        "proj_bcdt": rng.normal((width, dt_rank + 2 * d_state), INIT_STD, dtype),
        "dt_proj": rng.normal((dt_rank, width), INIT_STD, dtype),
        "dt_bias": _inv_softplus(dt).astype(dtype),
        "A_log": np.tile(np.log(a), (width, 1)).astype(dtype),
        "D": np.ones(width, dtype),
    }


def _init_linear(rng, fan_in, fan_out, dtype):
    return {"w": rng.normal((fan_in, fan_out), INIT_STD, dtype), "b": np.zeros(fan_out, dtype)}


def _init_norm(width, dtype):
    return {"scale": np.ones(width, dtype), "bias": np.zeros(width, dtype)}


def init_vim_block(rng, channels, d_state, d_conv=4, expand=2, dt_rank=None, dtype=np.float32):
    width = expand * channels
    dt_rank = dt_rank or math.ceil(channels / 16)
    p = {}
    p.update(prefixed(_init_norm(channels, dtype), "norm."))
    p.update(prefixed(_init_linear(rng, channels, width, dtype), "proj_z."))
    p.update(prefixed(_init_linear(rng, channels, width, dtype), "proj_x."))
    p.update(prefixed(init_ssm_path(rng, width, d_state, d_conv, dt_rank, dtype), "fwd."))
    p.update(prefixed(init_ssm_path(rng, width, d_state, d_conv, dt_rank, dtype), "bwd."))
    p.update(prefixed(_init_linear(rng, width, channels, dtype), "proj_out."))
    return p


def init_fusion(rng, channels, d_state, d_conv=4, expand=2, dt_rank=None, dtype=np.float32):
    width = expand * channels
    dt_rank = dt_rank or math.ceil(channels / 16)
    p = {}
    for m in ("rgb", "event"):
        p.update(prefixed(_init_norm(channels, dtype), f"{m}.norm."))
        p.update(prefixed(_init_linear(rng, channels, width, dtype), f"{m}.proj_x."))
        p.update(prefixed(_init_linear(rng, channels, width, dtype), f"{m}.proj_z."))
        p.update(prefixed(init_ssm_path(rng, width, d_state, d_conv, dt_rank, dtype), f"{m}.ssm."))
        p.update(prefixed(_init_linear(rng, width, channels, dtype), f"{m}.proj_out."))
    return p


# ---------------------------------------------------------------- patch embedding

def _patchify(image, patch):
    b, h, w, ch = image.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch {patch}")
    x = image.reshape(b, h // patch, patch, w // patch, patch, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * ch)


def patch_embed(image, patch, w, b, pos):
    """Row-major patch tokens ``proj(flatten(patch)) + pos``. Accepts [H,W,ch] or [B,H,W,ch]."""
    single = image.ndim == 3
    img = image[None] if single else image
    flat = _patchify(img, patch)
    if pos.shape[0] != flat.shape[1]:
        raise DimensionError(f"position table has {pos.shape[0]} rows, image gives {flat.shape[1]} patches")
    out = flat @ w + b + pos
    return out[0] if single else out


def patch_embed_fwd(image, patch, w, b, pos):
    flat = _patchify(image, patch)
    if pos.shape[0] != flat.shape[1]:
        raise DimensionError(f"position table has {pos.shape[0]} rows, image gives {flat.shape[1]} patches")
    return flat @ w + b + pos, flat


def patch_embed_bwd(flat, w, gout):
    _, gw, gb = linear_bwd(flat, w, gout)
    return gw, gb, gout.sum(axis=0)


# ---------------------------------------------------------------- SSM path

def ssm_path_fwd(x, p, opts=DEFAULT_OPTIONS):
    """``y = SSM(SiLU(Conv1d(x)))`` with B, C, delta projected from the conv output."""
    n_state = p["A_log"].shape[1]
    rank = p["dt_proj"].shape[0]
    c = dw_conv1d(x, p["conv"])
    xp = silu(c)
    bcdt = xp @ p["proj_bcdt"]
    dtr = bcdt[..., :rank]
    Bm = bcdt[..., rank:rank + n_state]
    Cm = bcdt[..., rank + n_state:]
    pre = dtr @ p["dt_proj"] + p["dt_bias"]
    dt = softplus(pre)
    D = p["D"] if opts.d_skip else np.zeros_like(p["D"])
    sp = SsmParams(p["A_log"], D)
    inputs = ScanInputs(xp, Bm, Cm, dt)
    res = selective_scan_seq(sp, inputs, opts.mode, keep_states=True)
    return res.y, (x, c, xp, dtr, pre, sp, inputs, res.states, p, opts)


def ssm_path_bwd(cache, gy):
    x, c, xp, dtr, pre, sp, inputs, states, p, opts = cache
    sg = selective_scan_backward(sp, inputs, gy, opts.mode, states=states)
    g_pre = sg.delta * sigmoid(pre)
    g_dtr, g_dt_proj, g_dt_bias = linear_bwd(dtr, p["dt_proj"], g_pre)
    g_bcdt = np.concatenate([g_dtr, sg.B_t, sg.C_t], axis=-1)
    g_xp, g_proj_bcdt, _ = linear_bwd(xp, p["proj_bcdt"], g_bcdt, has_bias=False)
    g_xp += sg.x_prime
    g_c = g_xp * silu_grad(c)
    g_x, g_conv = dw_conv1d_bwd(x, p["conv"], g_c)
    grads = {
        "conv": g_conv, "proj_bcdt": g_proj_bcdt, "dt_proj": g_dt_proj, "dt_bias": g_dt_bias,
        "A_log": sg.A_log, "D": sg.D_skip if opts.d_skip else np.zeros_like(sg.D_skip),
    }
    return g_x, grads


# ---------------------------------------------------------------- Vim block

def _check_channels(h, p):
    if h.shape[-1] != p["norm.scale"].shape[0]:
        raise DimensionError(f"tokens have {h.shape[-1]} channels, block expects {p['norm.scale'].shape[0]}")


def vim_block_fwd(h, p, opts=DEFAULT_OPTIONS):
    """Bidirectional block on ``h`` [B, T, C]; returns ``(out, cache)``."""
    _check_channels(h, p)
    n, ln_cache = layer_norm_fwd(h, p["norm.scale"], p["norm.bias"])
    z = linear(n, p["proj_z.w"], p["proj_z.b"])
    x = linear(n, p["proj_x.w"], p["proj_x.b"])
    y_f, c_f = ssm_path_fwd(x, subdict(p, "fwd."), opts)
    y_br, c_b = ssm_path_fwd(np.ascontiguousarray(x[:, ::-1]), subdict(p, "bwd."), opts)
    y_sum = y_f + y_br[:, ::-1]
    sz = silu(z)
    y_gated = y_sum * sz
    out = h + linear(y_gated, p["proj_out.w"], p["proj_out.b"])
    return out, (n, ln_cache, z, y_sum, sz, y_gated, c_f, c_b, p)


def vim_block_bwd(cache, gout):
    n, ln_cache, z, y_sum, sz, y_gated, c_f, c_b, p = cache
    g_gated, g_wo, g_bo = linear_bwd(y_gated, p["proj_out.w"], gout)
    g_sum = g_gated * sz
    g_z = g_gated * y_sum * silu_grad(z)
    g_xf, grads_f = ssm_path_bwd(c_f, g_sum)
    g_xbr, grads_b = ssm_path_bwd(c_b, np.ascontiguousarray(g_sum[:, ::-1]))
    g_x = g_xf + g_xbr[:, ::-1]
    g_nz, g_wz, g_bz = linear_bwd(n, p["proj_z.w"], g_z)
    g_nx, g_wx, g_bx = linear_bwd(n, p["proj_x.w"], g_x)
    g_h, g_scale, g_bias = layer_norm_bwd(ln_cache, g_nz + g_nx)
    grads = {
        "norm.scale": g_scale, "norm.bias": g_bias,
        "proj_z.w": g_wz, "proj_z.b": g_bz, "proj_x.w": g_wx, "proj_x.b": g_bx,
        "proj_out.w": g_wo, "proj_out.b": g_bo,
    }
    grads.update(prefixed(grads_f, "fwd."))
    grads.update(prefixed(grads_b, "bwd."))
    return gout + g_h, grads


def vim_block_pre_residual(h, p, opts=DEFAULT_OPTIONS):
    """Gated scan output ``y'`` before the output projection and residual."""
    return vim_block_fwd(h, p, opts)[1][5]


def vim_block_forward(tokens: TokenSeq, params, opts=DEFAULT_OPTIONS) -> TokenSeq:
    out, _ = vim_block_fwd(tokens.data, params, opts)
    return TokenSeq(out, tokens.split)


# ---------------------------------------------------------------- backbone

def backbone_fwd(template, search, blocks, opts=DEFAULT_OPTIONS):
    """Concatenate template and search tokens and run the block stack."""
    if not blocks:
        raise DimensionError("backbone needs at least one block")
    if template.shape[-1] != search.shape[-1]:
        raise DimensionError("template and search tokens differ in channel width")
    h = np.concatenate([template, search], axis=1)
    caches = []
    for p in blocks:
        h, c = vim_block_fwd(h, p, opts)
        caches.append(c)
    return h, caches


def backbone_bwd(caches, gout, split):
    grads = [None] * len(caches)
    g = gout
    for i in range(len(caches) - 1, -1, -1):
        g, grads[i] = vim_block_bwd(caches[i], g)
    return g[:, :split], g[:, split:], grads


def backbone_forward(template, search, blocks, opts=DEFAULT_OPTIONS) -> TokenSeq:
    t = template.data if isinstance(template, TokenSeq) else template
    s = search.data if isinstance(search, TokenSeq) else search
    h, _ = backbone_fwd(t, s, blocks, opts)
    return TokenSeq(h, t.shape[1])


# ---------------------------------------------------------------- fusion

def fusion_fwd(f_rgb, f_event, p, opts=DEFAULT_OPTIONS):
    """Cross-gated fusion; returns ``((rgb_out, event_out), cache)``.

    Each modality's scan output is computed once; the rgb branch gates the sum
    of both with SiLU(z_rgb) and the event branch with SiLU(z_event).
    """
    if f_rgb.shape != f_event.shape:
        raise DimensionError(f"fusion inputs differ in shape: {f_rgb.shape} vs {f_event.shape}")
    per = {}
    for m, f in (("rgb", f_rgb), ("event", f_event)):
        pm = subdict(p, m + ".")
        _check_channels(f, pm)
        n, ln_cache = layer_norm_fwd(f, pm["norm.scale"], pm["norm.bias"])
        x = linear(n, pm["proj_x.w"], pm["proj_x.b"])
        z = linear(n, pm["proj_z.w"], pm["proj_z.b"])
        y, ssm_cache = ssm_path_fwd(x, subdict(pm, "ssm."), opts)
        per[m] = (pm, n, ln_cache, z, y, ssm_cache)
    y_sum = per["rgb"][4] + per["event"][4]
    outs, gated = [], {}
    for m, f in (("rgb", f_rgb), ("event", f_event)):
        pm, z = per[m][0], per[m][3]
        sz = silu(z)
        g = y_sum * sz
        gated[m] = (sz, g)
        outs.append(f + linear(g, pm["proj_out.w"], pm["proj_out.b"]))
    return tuple(outs), (per, y_sum, gated)


def fusion_bwd(cache, g_rgb_out, g_event_out):
    per, y_sum, gated = cache
    grads = {}
    g_y_sum = np.zeros_like(y_sum)
    g_z = {}
    for m, gout in (("rgb", g_rgb_out), ("event", g_event_out)):
        pm, z = per[m][0], per[m][3]
        sz, g = gated[m]
        g_gated, g_wo, g_bo = linear_bwd(g, pm["proj_out.w"], gout)
        grads[f"{m}.proj_out.w"] = g_wo
        grads[f"{m}.proj_out.b"] = g_bo
        g_y_sum += g_gated * sz
        g_z[m] = g_gated * y_sum * silu_grad(z)
    g_in = {}
    for m, gout in (("rgb", g_rgb_out), ("event", g_event_out)):
        pm, n, ln_cache, z, y, ssm_cache = per[m]
        g_x, g_ssm = ssm_path_bwd(ssm_cache, g_y_sum)
        grads.update(prefixed(g_ssm, f"{m}.ssm."))
        g_nx, g_wx, g_bx = linear_bwd(n, pm["proj_x.w"], g_x)
        g_nz, g_wz, g_bz = linear_bwd(n, pm["proj_z.w"], g_z[m])
        g_f, g_scale, g_bias = layer_norm_bwd(ln_cache, g_nx + g_nz)
        grads.update({
            f"{m}.proj_x.w": g_wx, f"{m}.proj_x.b": g_bx, f"{m}.proj_z.w": g_wz, f"{m}.proj_z.b": g_bz,
            f"{m}.norm.scale": g_scale, f"{m}.norm.bias": g_bias,
        })
        g_in[m] = gout + g_f
    return g_in["rgb"], g_in["event"], grads


def fusion_mamba(f_rgb: TokenSeq, f_event: TokenSeq, params, opts=DEFAULT_OPTIONS):
    if f_rgb.split != f_event.split:
        raise DimensionError("rgb and event token splits differ")
    (o_r, o_e), _ = fusion_fwd(f_rgb.data, f_event.data, params, opts)
    return TokenSeq(o_r, f_rgb.split), TokenSeq(o_e, f_event.split)
