"""Center-based tracking head: three Conv-BN-ReLU towers over the search feature map."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
from ..numerics import batch_norm_bwd, batch_norm_fwd, conv3x3, conv3x3_bwd, linear_bwd, sigmoid

BRANCHES = (("cls", 1), ("offset", 2), ("size", 2))
HEAD_LAYERS = 4
CLS_PRIOR = 0.1


@dataclass
class ScoreMapOutput:
    cls: np.ndarray  # [B, S, S] in (0, 1)
    offset: np.ndarray  # [B, S, S, 2], (x, y) within the cell
    size: np.ndarray  # [B, S, S, 2], (w, h) normalized to the search region

    @property
    def grid(self):
        return self.cls.shape[-1]


def tower_channels(in_channels, layers=HEAD_LAYERS):
    chans = [in_channels]
    for _ in range(layers):
        chans.append(max(1, chans[-1] // 2))
    return chans


def init_head(rng, in_channels, layers=HEAD_LAYERS, dtype=np.float32):
    """Returns ``(params, buffers)``; buffers hold the batch-norm running statistics."""
    params, buffers = {}, {}
    chans = tower_channels(in_channels, layers)
    for name, out in BRANCHES:
        for i in range(layers):
            cin, cout = chans[i], chans[i + 1]
            params[f"{name}.{i}.w"] = rng.normal((3, 3, cin, cout), math.sqrt(2.0 / (9 * cin)), dtype)
            params[f"{name}.{i}.gamma"] = np.ones(cout, dtype)
            params[f"{name}.{i}.beta"] = np.zeros(cout, dtype)
            buffers[f"{name}.{i}.running_mean"] = np.zeros(cout, dtype)
            buffers[f"{name}.{i}.running_var"] = np.ones(cout, dtype)
        params[f"{name}.out.w"] = rng.normal((chans[-1], out), 0.02, dtype)
        bias = math.log(CLS_PRIOR / (1 - CLS_PRIOR)) if name == "cls" else 0.0
        params[f"{name}.out.b"] = np.full(out, bias, dtype)
    return params, buffers


def to_feature_map(tokens):
    b, n, c = tokens.shape
    s = math.isqrt(n)
    if s * s != n:
        raise DimensionError(f"{n} search tokens do not form a square grid")
    return tokens.reshape(b, s, s, c)


def head_fwd(search_tokens, params, buffers, train=False):
    """search_tokens: [B, S*S, 2C] channel-concatenated fused search features."""
    fmap = to_feature_map(search_tokens)
    layers = sum(1 for k in params if k.startswith("cls.") and k.endswith(".gamma"))
    outs, caches = {}, {}
    for name, _ in BRANCHES:
        x = fmap
        tower = []
        for i in range(layers):
            y, cols = conv3x3(x, params[f"{name}.{i}.w"])
            y, bn = batch_norm_fwd(y, params[f"{name}.{i}.gamma"], params[f"{name}.{i}.beta"],
                                   buffers[f"{name}.{i}.running_mean"], buffers[f"{name}.{i}.running_var"],
                                   train)
            mask = y > 0
            tower.append((cols, x.shape, bn, mask))
            x = y * mask
        logits = x @ params[f"{name}.out.w"] + params[f"{name}.out.b"]
        prob = sigmoid(logits)
        outs[name] = prob
        caches[name] = (tower, x, prob)
    out = ScoreMapOutput(outs["cls"][..., 0], outs["offset"], outs["size"])
    return out, (caches, layers)


def head_bwd(cache, params, g_cls, g_offset, g_size):
    """Gradients given dL/d(prob) for each branch. Returns ``(g_tokens, grads)``."""
    caches, layers = cache
    grads = {}
    g_fmap = None
    for name, g in (("cls", g_cls[..., None]), ("offset", g_offset), ("size", g_size)):
        tower, x, prob = caches[name]
        g_logits = g * prob * (1.0 - prob)
        g_x, g_w, g_b = linear_bwd(x, params[f"{name}.out.w"], g_logits)
        grads[f"{name}.out.w"] = g_w
        grads[f"{name}.out.b"] = g_b
        for i in range(layers - 1, -1, -1):
            cols, x_shape, bn, mask = tower[i]
            g_y = g_x * mask
            g_y, g_gamma, g_beta = batch_norm_bwd(bn, g_y)
            g_x, g_w = conv3x3_bwd(cols, x_shape, params[f"{name}.{i}.w"], g_y)
            grads[f"{name}.{i}.w"] = g_w
            grads[f"{name}.{i}.gamma"] = g_gamma
            grads[f"{name}.{i}.beta"] = g_beta
        g_fmap = g_x if g_fmap is None else g_fmap + g_x
    b, s, _, c = g_fmap.shape
    return g_fmap.reshape(b, s * s, c), grads


def head_forward(fused_search, params, buffers, train=False) -> ScoreMapOutput:
    """Score map, offset and size for ``[N2, 2C]`` or ``[B, N2, 2C]`` fused search tokens."""
    single = fused_search.ndim == 2
    out, _ = head_fwd(fused_search[None] if single else fused_search, params, buffers, train)
    if single:
        return ScoreMapOutput(out.cls[0], out.offset[0], out.size[0])
    return out
