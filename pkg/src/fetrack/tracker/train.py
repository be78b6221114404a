"""Toy-scale training: template/search pair sampling, loss, backward, AdamW."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..errors import ConfigError, NumericError
from ..events import NEUTRAL, SEARCH_CONTEXT, TEMPLATE_CONTEXT, SequenceData, crop_patch
from ..numerics import Rng
from .losses import LossWeights, tracking_loss
from .model import Model, ModelConfig, backward, forward, init_model
from .optim import OptimState, adamw_step

MODALITY_CHOICES = ("fused", "rgb", "event")
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 2000
    batch: int = 8
    lr: float = 4e-4
    weight_decay: float = 1e-4
    seed: int = 0
    modality: str = "fused"
    center_jitter: float = 3.0  # search-center shift, in units of sqrt(w*h)
    scale_jitter: float = 0.25  # log-normal std of the search-box size
    max_gap: int = 50  # largest template/search frame distance
    augment: bool = True  # random flips and transposes of each template/search pair

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.batch < 1:
            raise ConfigError("train.batch must be >= 1")
        if self.modality not in MODALITY_CHOICES:
            raise ConfigError(f"train.modality must be one of {MODALITY_CHOICES}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("train.lr must be > 0 and train.weight_decay >= 0")


def normalize(img):
    return ((np.asarray(img, dtype=np.float32) / 255.0 - PIXEL_MEAN) / PIXEL_STD).astype(np.float32)


def neutral_like(img):
    return np.full(np.shape(img), normalize(NEUTRAL), dtype=np.float32)


class PairSampler:
    """Draws (template, search) crops plus the normalized search-region target box.

    Draw order depends only on the seed, so batches are reproducible.
    """

    def __init__(self, sequences: List[SequenceData], cfg: ModelConfig, settings: TrainSettings, rng: Rng):
        usable = [s for s in sequences if len(s.frames) >= 1]
        if not usable:
            raise ConfigError("training set has no frames")
        self.seqs = usable
        self.events = [s.event_frames() for s in usable]
        self.cfg = cfg
        self.settings = settings
        self.rng = rng

    def sample(self):
        r = self.rng
        s = int(r.integers(0, len(self.seqs)))
        seq, ev = self.seqs[s], self.events[s]
        n = len(seq.frames)
        i = int(r.integers(0, n))
        lo, hi = max(0, i - self.settings.max_gap), min(n - 1, i + self.settings.max_gap)
        j = int(r.integers(lo, hi + 1))
        gz, gx = seq.gts[i].as_array(), seq.gts[j].as_array()

        size = gx[2:] * np.exp(r.gen.standard_normal(2) * self.settings.scale_jitter)
        shift = math.sqrt(size[0] * size[1]) * self.settings.center_jitter * (r.uniform(size=2) - 0.5)
        jittered = np.concatenate([gx[:2] + shift, size])

        cfg = self.cfg
        rgb_z = crop_patch(seq.frames[i], gz, TEMPLATE_CONTEXT, cfg.template_size)
        ev_z = crop_patch(ev[i], gz, TEMPLATE_CONTEXT, cfg.template_size)
        rgb_x, geo = crop_patch(seq.frames[j], jittered, SEARCH_CONTEXT, cfg.search_size, return_geometry=True)
        ev_x = crop_patch(ev[j], jittered, SEARCH_CONTEXT, cfg.search_size)
        target = geo.box_to_patch(gx)
        crops = (rgb_z, rgb_x, ev_z, ev_x)
        if self.settings.augment:
            crops, target = dihedral(crops, target, int(r.integers(0, 8)))
        return crops, target

    def batch(self, size):
        items = [self.sample() for _ in range(size)]
        keys = ("rgb_z", "rgb_x", "event_z", "event_x")
        inputs = {k: normalize(np.stack([it[0][c] for it in items])) for c, k in enumerate(keys)}
        targets = np.stack([it[1] for it in items])
        return inputs, targets


def dihedral(crops, target, k):
    """One of the 8 square symmetries, applied alike to every crop and the target box.

    Bit 2 transposes, bit 0 mirrors left-right, bit 1 mirrors top-bottom.
    Targets are in [0, 1] patch units, so a mirror maps c to 1 - c.
    """
    cx, cy, w, h = target
    if k & 4:
        crops = [np.swapaxes(c, 0, 1) for c in crops]
        cx, cy, w, h = cy, cx, h, w
    if k & 1:
        crops = [c[:, ::-1] for c in crops]
        cx = 1.0 - cx
    if k & 2:
        crops = [c[::-1] for c in crops]
        cy = 1.0 - cy
    return tuple(crops), np.array([cx, cy, w, h])


def apply_modality(inputs, modality):
    """Single-modality runs see a constant neutral image in place of the other modality."""
    if modality == "fused":
        return inputs
    drop = "event" if modality == "rgb" else "rgb"
    out = dict(inputs)
    for part in ("z", "x"):
        out[f"{drop}_{part}"] = neutral_like(inputs[f"{drop}_{part}"])
    return out


@dataclass
class TrainResult:
    model: Model
    losses: List[float] = field(default_factory=list)


def train(sequences: List[SequenceData], cfg: ModelConfig, settings: TrainSettings, dtype=np.float32,
          log_file=None, weights: LossWeights = LossWeights(), model: Optional[Model] = None) -> TrainResult:
    """Train a fresh model (or continue ``model``) and return it with the per-step losses.

    ``log_file`` receives one ``step loss`` line per step.
    """
    root = Rng(settings.seed)
    if model is None:
        model = init_model(cfg, seed=settings.seed, dtype=dtype)
    sampler = PairSampler(sequences, cfg, settings, root.child(1))
    opt = OptimState(lr=settings.lr, weight_decay=settings.weight_decay)
    losses = []
    for step in range(1, settings.steps + 1):
        inputs, targets = sampler.batch(settings.batch)
        inputs = {k: v.astype(dtype) for k, v in apply_modality(inputs, settings.modality).items()}
        out, cache = forward(model, inputs, train=True)
        loss, (g_cls, g_off, g_size), _ = tracking_loss(out, targets, weights)
        if not math.isfinite(loss):
            raise NumericError(f"training loss became {loss}", step=step)
        grads = backward(model, cache, g_cls, g_off, g_size)
        adamw_step(model.params, grads, opt)
        losses.append(float(loss))
        if log_file is not None:
            log_file.write(f"{step} {loss:.6f}\n")
    return TrainResult(model, losses)
