"""End-to-end frame-event tracking network: embed, two backbones, fusion, head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .. import blocks
from ..blocks import BlockOptions, prefixed, subdict
from ..errors import ConfigError
from ..numerics import Rng
from ..ssm import zoh
from .head import HEAD_LAYERS, head_bwd, head_fwd, init_head

MODALITIES = ("rgb", "event")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    depth: int = 2
    d_state: int = 4
    d_conv: int = 4
    expand: int = 2
    dt_rank: int = 0  # 0 -> ceil(channels / 16)
    patch: int = 8
    template_size: int = 32
    search_size: int = 64
    in_chans: int = 3
    head_layers: int = HEAD_LAYERS
    zoh_mode: str = zoh.EXACT
    d_skip: bool = True

    def __post_init__(self):
        for name in ("channels", "depth", "d_state", "d_conv", "expand", "patch", "template_size",
                     "search_size", "in_chans", "head_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.template_size % self.patch or self.search_size % self.patch:
            raise ConfigError("template/search sizes must be multiples of the patch size")
        if self.zoh_mode not in zoh.MODES:
            raise ConfigError(f"unknown zoh mode {self.zoh_mode!r}")

    @property
    def rank(self):
        return self.dt_rank or math.ceil(self.channels / 16)

    @property
    def width(self):
        return self.expand * self.channels

    @property
    def n_template(self):
        return (self.template_size // self.patch) ** 2

    @property
    def n_search(self):
        return (self.search_size // self.patch) ** 2

    @property
    def grid(self):
        return self.search_size // self.patch

    @property
    def options(self):
        return BlockOptions(self.zoh_mode, self.d_skip)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def with_depth(self, depth):
        return replace(self, depth=depth)


# Documented scales. "paper" uses Vim-Ti widths (C=192) so the parameter
# count stays in the lightweight regime the method reports.
TOY = ModelConfig()
PAPER = ModelConfig(channels=192, depth=12, d_state=16, patch=16, template_size=128, search_size=256)


@dataclass
class Model:
    cfg: ModelConfig
    params: dict
    buffers: dict

    def astype(self, dtype):
        return Model(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()},
                     {k: v.astype(dtype) for k, v in self.buffers.items()})

    def copy(self):
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.buffers.items()})


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    rng = Rng(seed)
    params = {}
    patch_dim = cfg.patch * cfg.patch * cfg.in_chans
    for k, m in enumerate(MODALITIES):
        r = rng.child(k)
        params[f"{m}.patch.w"] = r.normal((patch_dim, cfg.channels), 0.02, dtype)
        params[f"{m}.patch.b"] = np.zeros(cfg.channels, dtype)
        params[f"{m}.pos_z"] = r.normal((cfg.n_template, cfg.channels), 0.02, dtype)
        params[f"{m}.pos_x"] = r.normal((cfg.n_search, cfg.channels), 0.02, dtype)
        for i in range(cfg.depth):
            blk = blocks.init_vim_block(r.child(i), cfg.channels, cfg.d_state, cfg.d_conv, cfg.expand,
                                        cfg.rank, dtype)
            params.update(prefixed(blk, f"{m}.blocks.{i}."))
    params.update(prefixed(blocks.init_fusion(rng.child(10), cfg.channels, cfg.d_state, cfg.d_conv,
                                              cfg.expand, cfg.rank, dtype), "fusion."))
    head_p, head_b = init_head(rng.child(11), 2 * cfg.channels, cfg.head_layers, dtype)
    params.update(prefixed(head_p, "head."))
    return Model(cfg, params, prefixed(head_b, "head."))


def block_params(params, modality, depth):
    return [subdict(params, f"{modality}.blocks.{i}.") for i in range(depth)]


def forward(model: Model, inputs, train=False):
    """Run the network.

    ``inputs`` maps ``rgb_z, rgb_x, event_z, event_x`` to normalized images
    [B, H, W, ch]. Returns ``(ScoreMapOutput, cache)``.
    """
    cfg, p = model.cfg, model.params
    opts = cfg.options
    feats, caches = {}, {}
    for m in MODALITIES:
        tz, fz = blocks.patch_embed_fwd(inputs[f"{m}_z"], cfg.patch, p[f"{m}.patch.w"], p[f"{m}.patch.b"],
                                        p[f"{m}.pos_z"])
        tx, fx = blocks.patch_embed_fwd(inputs[f"{m}_x"], cfg.patch, p[f"{m}.patch.w"], p[f"{m}.patch.b"],
                                        p[f"{m}.pos_x"])
        h, bc = blocks.backbone_fwd(tz, tx, block_params(p, m, cfg.depth), opts)
        feats[m] = h
        caches[m] = (fz, fx, bc)
    (f_rgb, f_event), fc = blocks.fusion_fwd(feats["rgb"], feats["event"], subdict(p, "fusion."), opts)
    n1 = cfg.n_template
    search = np.concatenate([f_rgb[:, n1:], f_event[:, n1:]], axis=-1)
    out, hc = head_fwd(search, subdict(p, "head."), subdict(model.buffers, "head."), train)
    return out, (caches, fc, hc, f_rgb.shape)


def backward(model: Model, cache, g_cls, g_offset, g_size):
    """Gradients of the loss for every parameter, given dL/d(head probabilities)."""
    cfg, p = model.cfg, model.params
    caches, fc, hc, shape = cache
    grads = {}
    g_search, g_head = head_bwd(hc, subdict(p, "head."), g_cls, g_offset, g_size)
    grads.update(prefixed(g_head, "head."))
    n1, c = cfg.n_template, cfg.channels
    g_rgb = np.zeros(shape, dtype=g_search.dtype)
    g_event = np.zeros(shape, dtype=g_search.dtype)
    g_rgb[:, n1:] = g_search[..., :c]
    g_event[:, n1:] = g_search[..., c:]
    g_rgb, g_event, g_fusion = blocks.fusion_bwd(fc, g_rgb, g_event)
    grads.update(prefixed(g_fusion, "fusion."))
    for m, g in (("rgb", g_rgb), ("event", g_event)):
        fz, fx, bc = caches[m]
        g_tz, g_tx, g_blocks = blocks.backbone_bwd(bc, g, n1)
        for i, gb in enumerate(g_blocks):
            grads.update(prefixed(gb, f"{m}.blocks.{i}."))
        gw_z, gb_z, g_pos_z = blocks.patch_embed_bwd(fz, p[f"{m}.patch.w"], g_tz)
        gw_x, gb_x, g_pos_x = blocks.patch_embed_bwd(fx, p[f"{m}.patch.w"], g_tx)
        grads[f"{m}.patch.w"] = gw_z + gw_x
        grads[f"{m}.patch.b"] = gb_z + gb_x
        grads[f"{m}.pos_z"] = g_pos_z
        grads[f"{m}.pos_x"] = g_pos_x
    return grads
