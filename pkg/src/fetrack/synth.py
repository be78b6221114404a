"""Synthetic frame + event sequences: a colored square moving over a textured
background, seen by an RGB camera (with optional overexposure and motion blur)
and by an ideal log-intensity event sensor."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .events import EventStream, ExposureWindow, GroundTruthBox
from .numerics import Rng

MOTIONS = ("linear", "sinusoidal", "piecewise")
LOG_EPS = 1e-3
# luminance weights used for the event sensor
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SynthConfig:
    width: int = 64
    height: int = 64
    frames: int = 200
    object_size: float = 12.0  # side of the square, pixels
    motion: str = "piecewise"
    speed: float = 1.5  # pixels per frame
    texture: float = 0.25  # background texture contrast
    theta: float = 0.15  # event contrast threshold
    substeps: int = 8  # event samples per frame period
    frame_period_us: int = 40000
    hdr: bool = True  # overexpose alternating blocks of frames
    hdr_block: int = 10
    hdr_gain: float = 4.0
    blur: bool = False

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError("synth.frames must be >= 1")
        if self.theta <= 0:
            raise ConfigError("synth.theta must be positive")
        if self.width < 8 or self.height < 8:
            raise ConfigError("synth resolution must be at least 8x8")
        if not 0 < self.object_size < min(self.width, self.height):
            raise ConfigError("synth.object_size must fit inside the image")
        if self.motion not in MOTIONS:
            raise ConfigError(f"synth.motion must be one of {MOTIONS}")
        if self.substeps < 8:
            raise ConfigError("synth.substeps must be >= 8 (events sampled at >= 8x frame rate)")
        if self.frame_period_us % self.substeps:
            raise ConfigError("synth.frame_period_us must be divisible by synth.substeps")
        if self.speed < 0:
            raise ConfigError("synth.speed must be >= 0")

    def with_(self, **kw):
        return replace(self, **kw)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- trajectory

def _reflect(x, lo, hi):
    """Fold ``x`` into [lo, hi] by mirror reflection at both ends."""
    span = hi - lo
    if span <= 0:
        return np.full_like(np.asarray(x, dtype=np.float64), lo)
    y = np.mod(np.asarray(x, dtype=np.float64) - lo, 2 * span)
    return lo + np.where(y > span, 2 * span - y, y)


class Trajectory:
    """Continuous object-center path; time in frame periods."""

    def __init__(self, cfg: SynthConfig, rng: Rng):
        self.cfg = cfg
        half = cfg.object_size / 2
        self.lo = np.array([half + 1.0, half + 1.0])
        self.hi = np.array([cfg.width - half - 1.0, cfg.height - half - 1.0])
        self.start = rng.uniform(self.lo, self.hi, size=2)
        ang = rng.uniform(0, 2 * math.pi)
        self.dir = np.array([math.cos(ang), math.sin(ang)])
        if cfg.motion == "sinusoidal":
            self.period = rng.uniform(30, 60)
            self.phase = rng.uniform(0, 2 * math.pi, size=2)
            self.amp = np.array([cfg.speed, cfg.speed]) * self.period / (2 * math.pi)
        elif cfg.motion == "piecewise":
            # segments of 8..20 frames: pauses, normal motion, and speed bursts
            n_seg = cfg.frames // 8 + 2
            lengths = rng.integers(8, 21, size=n_seg).astype(np.float64)
            kinds = rng.uniform(0, 1, size=n_seg)
            speeds = np.where(kinds < 0.25, 0.0, np.where(kinds < 0.8, 1.0, 2.5)) * cfg.speed
            angles = rng.uniform(0, 2 * math.pi, size=n_seg)
            self.knots = np.concatenate([[0.0], np.cumsum(lengths)])
            self.vel = speeds[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
            disp = self.vel * lengths[:, None]
            self.offsets = np.concatenate([np.zeros((1, 2)), np.cumsum(disp, axis=0)])

    def center(self, f):
        """Center(s) at time(s) ``f`` (frame periods) -> [..., 2]."""
        f = np.asarray(f, dtype=np.float64)
        cfg = self.cfg
        if cfg.motion == "linear":
            raw = self.start + f[..., None] * cfg.speed * self.dir
        elif cfg.motion == "sinusoidal":
            mid = (self.lo + self.hi) / 2
            amp = np.minimum(self.amp, (self.hi - self.lo) / 2)
            raw = mid + amp * np.sin(2 * math.pi * f[..., None] / self.period + self.phase)
            return raw
        else:
            k = np.clip(np.searchsorted(self.knots, f, side="right") - 1, 0, len(self.vel) - 1)
            raw = self.start + self.offsets[k] + self.vel[k] * (f - self.knots[k])[..., None]
        return np.stack([_reflect(raw[..., 0], self.lo[0], self.hi[0]),
                         _reflect(raw[..., 1], self.lo[1], self.hi[1])], axis=-1)


# ---------------------------------------------------------------- rendering

def make_background(cfg: SynthConfig, rng: Rng):
    noise = rng.normal((cfg.height, cfg.width, 3), 1.0, np.float64)
    smooth = gaussian_filter(noise, sigma=(3, 3, 0), mode="wrap")
    smooth /= smooth.std() + 1e-12
    base = np.array([0.45, 0.45, 0.45]) + rng.uniform(-0.05, 0.05, size=3)
    return np.clip(base + cfg.texture * 0.5 * smooth, 0.05, 0.95)


def coverage(lo, hi, n):
    """Fraction of each unit cell [k, k+1), k < n, covered by [lo, hi)."""
    k = np.arange(n)
    return np.clip(np.minimum(k + 1, hi) - np.maximum(k, lo), 0.0, 1.0)


def render(background, color, center, side):
    """Scene radiance [H, W, 3] with an area-weighted square at ``center``."""
    H, W = background.shape[:2]
    half = side / 2
    cx = coverage(center[0] - half, center[0] + half, W)
    cy = coverage(center[1] - half, center[1] + half, H)
    a = (cy[:, None] * cx[None, :])[:, :, None]
    return background * (1 - a) + color * a


def to_uint8(img):
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def hdr_frame(k, cfg: SynthConfig):
    """Overexposed frames come in alternating blocks; frame 0 is always clean."""
    return cfg.hdr and (k // cfg.hdr_block) % 2 == 1


@dataclass
class SynthSequence:
    frames: list
    windows: list
    stream: EventStream
    gts: list
    hdr: list


def synth_generate(cfg: SynthConfig, seed: int) -> SynthSequence:
    rng = Rng(seed)
    traj = Trajectory(cfg, rng.child(0))
    background = make_background(cfg, rng.child(1))
    r = rng.child(2)
    # saturated object color that differs from the gray background
    color = np.clip(np.array([0.85, 0.25, 0.2]) + r.uniform(-0.1, 0.1, size=3), 0, 1)
    color = np.roll(color, int(r.integers(0, 3)))
    side = cfg.object_size
    T = cfg.frame_period_us
    n = cfg.frames

    frames, windows, gts, hdr = [], [], [], []
    for k in range(n):
        mid = k + 0.5
        if cfg.blur:
            taps = k + (np.arange(cfg.substeps) + 0.5) / cfg.substeps
            img = np.mean([render(background, color, traj.center(t), side) for t in taps], axis=0)
        else:
            img = render(background, color, traj.center(mid), side)
        over = hdr_frame(k, cfg)
        if over:
            img = np.clip(img * cfg.hdr_gain, 0.0, 1.0)
        frames.append(to_uint8(img))
        windows.append(ExposureWindow(k * T, (k + 1) * T))
        c = traj.center(mid)
        gts.append(GroundTruthBox(k, float(c[0]), float(c[1]), float(side), float(side)))
        hdr.append(over)

    stream = simulate_events(cfg, background, color, traj)
    return SynthSequence(frames, windows, stream, gts, hdr)


def simulate_events(cfg: SynthConfig, background, color, traj: Trajectory) -> EventStream:
    """Ideal event sensor: a pixel fires each time its log luminance moves a
    further ``theta`` from its level at the last event."""
    T = cfg.frame_period_us
    dt = T // cfg.substeps
    side = cfg.object_size
    luma = lambda img: img @ LUMA  # noqa: E731

    ref = np.log(luma(render(background, color, traj.center(0.0), side)) + LOG_EPS)
    ts, xs, ys, ps = [], [], [], []
    steps = cfg.frames * cfg.substeps
    for s in range(1, steps + 1):
        t_us = s * dt
        if t_us >= cfg.frames * T:
            t_us = cfg.frames * T - 1
        cur = np.log(luma(render(background, color, traj.center(s / cfg.substeps), side)) + LOG_EPS)
        diff = cur - ref
        count = np.floor(np.abs(diff) / cfg.theta).astype(np.int64)
        if not count.any():
            continue
        rows, cols = np.nonzero(count)
        c = count[rows, cols]
        pol = np.sign(diff[rows, cols]).astype(np.int64)
        ref[rows, cols] += pol * c * cfg.theta
        reps = np.repeat(np.arange(len(c)), c)
        ts.append(np.full(len(reps), t_us, dtype=np.int64))
        xs.append(cols[reps])
        ys.append(rows[reps])
        ps.append(pol[reps])
    if not ts:
        return EventStream.empty((cfg.width, cfg.height), cfg.frames * T)
    return EventStream(np.concatenate(ts), np.concatenate(xs), np.concatenate(ys), np.concatenate(ps),
                       (cfg.width, cfg.height), cfg.frames * T)
