"""Event streams, exposure-aligned event images, template/search cropping, and
the on-disk sequence format."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .errors import DataIOError, DimensionError, DomainError

NEUTRAL = 128
# signed counts saturate at |s| = 2; one event moves a pixel half way
EVENT_STEP = 64
EVENT_CLAMP = 2

TEMPLATE_CONTEXT = 2.0
SEARCH_CONTEXT = 4.0


@dataclass(frozen=True)
class EventPoint:
    t: int  # microseconds
    x: int
    y: int
    p: int  # +1 / -1


class EventStream:
    """Time-sorted events stored column-wise (t, x, y, p)."""

    def __init__(self, t, x, y, p, sensor, duration=None):
        self.t = np.asarray(t, dtype=np.int64)
        self.x = np.asarray(x, dtype=np.int32)
        self.y = np.asarray(y, dtype=np.int32)
        self.p = np.asarray(p, dtype=np.int8)
        self.sensor = (int(sensor[0]), int(sensor[1]))
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise DimensionError("event columns differ in length")
        if n and np.any(np.diff(self.t) < 0):
            raise DomainError("event timestamps must be nondecreasing")
        W, H = self.sensor
        if n and (self.x.min() < 0 or self.x.max() >= W or self.y.min() < 0 or self.y.max() >= H):
            raise DomainError(f"event outside the {W}x{H} sensor")
        if n and not np.all(np.abs(self.p) == 1):
            raise DomainError("polarity must be +1 or -1")
        last = int(self.t[-1]) + 1 if n else 0
        self.duration = int(duration) if duration is not None else last
        if self.duration < last:
            raise DomainError("stream duration ends before its last event")

    @classmethod
    def from_points(cls, points: Sequence[EventPoint], sensor, duration=None):
        cols = [[getattr(e, k) for e in points] for k in ("t", "x", "y", "p")]
        return cls(*cols, sensor=sensor, duration=duration)

    @classmethod
    def empty(cls, sensor, duration=0):
        return cls([], [], [], [], sensor, duration)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for k in range(len(self)):
            yield EventPoint(int(self.t[k]), int(self.x[k]), int(self.y[k]), int(self.p[k]))

    def window_slice(self, window: "ExposureWindow"):
        lo = np.searchsorted(self.t, window.t_start, side="left")
        hi = np.searchsorted(self.t, window.t_end, side="left")
        return slice(int(lo), int(hi))


@dataclass(frozen=True)
class ExposureWindow:
    """Half-open interval [t_start, t_end) in microseconds."""

    t_start: int
    t_end: int

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise DomainError(f"empty exposure window [{self.t_start}, {self.t_end})")


def check_windows(windows: Sequence[ExposureWindow]):
    for a, b in zip(windows, windows[1:]):
        if b.t_start < a.t_end:
            raise DomainError("exposure windows overlap or are out of order")


@dataclass(frozen=True)
class GroundTruthBox:
    frame_index: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DomainError(f"box at frame {self.frame_index} has non-positive size")

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


# ---------------------------------------------------------------- event images

def encode_counts(s):
    s = np.asarray(s)
    v = NEUTRAL + EVENT_STEP * np.sign(s) * np.minimum(np.abs(s), EVENT_CLAMP) / EVENT_CLAMP
    return np.clip(v, 0, 255).astype(np.uint8)


def stack_events_to_frame(stream: EventStream, window: ExposureWindow) -> np.ndarray:
    """Signed per-pixel event count in the window, encoded as an [H, W, 3] uint8 image."""
    if window.t_start < 0 or window.t_end > stream.duration:
        raise DomainError(f"window [{window.t_start}, {window.t_end}) outside the stream (0..{stream.duration})")
    W, H = stream.sensor
    sl = stream.window_slice(window)
    s = np.zeros(H * W, dtype=np.int64)
    np.add.at(s, stream.y[sl].astype(np.int64) * W + stream.x[sl], stream.p[sl].astype(np.int64))
    img = encode_counts(s.reshape(H, W))
    return np.repeat(img[:, :, None], 3, axis=2)


# ---------------------------------------------------------------- cropping

@dataclass(frozen=True)
class CropGeometry:
    """Square crop [x0, x0 + side) x [y0, y0 + side) in continuous image coordinates,
    where pixel (r, c) covers [c, c+1) x [r, r+1)."""

    x0: float
    y0: float
    side: float
    out: int

    @property
    def scale(self):
        """Image pixels per patch pixel."""
        return self.side / self.out

    def to_image(self, u, v):
        return self.x0 + np.asarray(u) * self.scale, self.y0 + np.asarray(v) * self.scale

    def to_patch(self, x, y):
        return (np.asarray(x) - self.x0) / self.scale, (np.asarray(y) - self.y0) / self.scale

    def box_to_patch(self, box):
        """Image box (cx, cy, w, h) -> box normalized to [0, 1] patch units."""
        b = np.asarray(box, dtype=np.float64)
        u, v = self.to_patch(b[..., 0], b[..., 1])
        return np.stack([u / self.out, v / self.out, b[..., 2] / self.side, b[..., 3] / self.side], axis=-1)

    def box_to_image(self, box):
        b = np.asarray(box, dtype=np.float64)
        x, y = self.to_image(b[..., 0] * self.out, b[..., 1] * self.out)
        return np.stack([x, y, b[..., 2] * self.side, b[..., 3] * self.side], axis=-1)


def crop_geometry(box, context, out) -> CropGeometry:
    cx, cy, w, h = (float(v) for v in (box.as_array() if hasattr(box, "as_array") else box))
    if w <= 0 or h <= 0:
        raise DomainError("cannot crop around a box with non-positive size")
    if context <= 0 or out <= 0:
        raise DomainError("context and output size must be positive")
    side = float(np.sqrt(w * h) * context)
    return CropGeometry(cx - side / 2, cy - side / 2, side, int(out))


def crop_patch(frame, box, context, out, return_geometry=False):
    """Square crop of side ``sqrt(w*h) * context`` around the box, resized to out x out.

    Samples falling outside the image take the per-channel mean of the part of
    the crop that lies inside it; samples inside are bilinear with edge clamping.
    """
    geo = crop_geometry(box, context, out)
    frame = np.asarray(frame)
    H, W = frame.shape[:2]
    img = frame if frame.ndim == 3 else frame[:, :, None]

    # pixel-center positions of the patch grid in image coordinates
    xs = geo.x0 + (np.arange(out) + 0.5) * geo.scale
    ys = geo.y0 + (np.arange(out) + 0.5) * geo.scale
    in_x = (xs >= 0) & (xs < W)
    in_y = (ys >= 0) & (ys < H)


    def taps(pos, n):
        p = np.clip(pos - 0.5, 0, n - 1)
        lo = np.floor(p).astype(np.intp)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, p - lo

    x_lo, x_hi, fx = taps(xs, W)
    y_lo, y_hi, fy = taps(ys, H)
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    # separable: blend rows first, then columns of the blended rows
    rows = img[y_lo].astype(np.float64)
    rows *= 1 - fy
    rows += img[y_hi] * fy
    patch = rows[:, x_lo]
    patch *= 1 - fx
    patch += rows[:, x_hi] * fx
    if not (in_x.all() and in_y.all()):
        # image pixels whose centers fall inside the crop square
        c0, c1 = (min(max(math.ceil(v - 0.5), 0), W) for v in (geo.x0, geo.x0 + geo.side))
        r0, r1 = (min(max(math.ceil(v - 0.5), 0), H) for v in (geo.y0, geo.y0 + geo.side))
        region = img[r0:r1, c0:c1] if r1 > r0 and c1 > c0 else img
        inside = in_y[:, None] & in_x[None, :]
        patch[~inside] = region.mean(axis=(0, 1), dtype=np.float64)
    if frame.ndim == 2:
        patch = patch[:, :, 0]
    return (patch, geo) if return_geometry else patch


# ---------------------------------------------------------------- file formats

def write_ppm(path, img):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError("P6 frames must be uint8 [H, W, 3]")
    H, W = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (W, H))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataIOError(f"cannot read frame {path}: {e}") from e
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DataIOError(f"{path}: not an 8-bit binary P6 pixmap")
    W, H = int(tokens[1]), int(tokens[2])
    body = data[pos + 1:pos + 1 + W * H * 3]
    if len(body) != W * H * 3:
        raise DataIOError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3).copy()


def write_pgm(path, img):
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise DimensionError("P5 maps must be uint8 [H, W]")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(np.ascontiguousarray(img).tobytes())


def format_box_line(frame_index, box):
    cx, cy, w, h = (float(v) for v in box)
    return f"{int(frame_index)} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}\n"


def write_boxes(path, indices, boxes):
    with open(path, "w") as f:
        for k, b in zip(indices, boxes):
            f.write(format_box_line(k, b))


def read_boxes(path):
    """``frame_index cx cy w h`` lines -> (indices [n], boxes [n, 4])."""
    try:
        rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    try:
        idx = np.array([int(r[0]) for r in rows], dtype=np.int64)
        boxes = np.array([[float(v) for v in r[1:5]] for r in rows], dtype=np.float64).reshape(-1, 4)
    except (ValueError, IndexError) as e:
        raise DataIOError(f"{path}: malformed box line ({e})") from e
    return idx, boxes


@dataclass
class SequenceData:
    name: str
    frames: List[np.ndarray]
    windows: List[ExposureWindow]
    stream: EventStream
    gts: List[GroundTruthBox]

    @property
    def size(self):
        H, W = self.frames[0].shape[:2]
        return W, H

    def event_frame(self, k):
        return stack_events_to_frame(self.stream, self.windows[k])

    def event_frames(self):
        return [self.event_frame(k) for k in range(len(self.frames))]


def write_sequence(seq_dir, frames, windows, stream: EventStream, gts):
    seq_dir = Path(seq_dir)
    try:
        (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
        with open(seq_dir / "events.txt", "w") as f:
            f.write(f"# sensor {stream.sensor[0]} {stream.sensor[1]} duration {stream.duration}\n")
            lines = np.stack([stream.t, stream.x.astype(np.int64), stream.y.astype(np.int64),
                              stream.p.astype(np.int64)], axis=1)
            np.savetxt(f, lines, fmt="%d")
        with open(seq_dir / "frames.idx", "w") as f:
            for k, (img, w) in enumerate(zip(frames, windows)):
                rel = f"frames/{k:05d}.ppm"
                write_ppm(seq_dir / rel, img)
                f.write(f"{k} {w.t_start} {w.t_end} {rel}\n")
        write_boxes(seq_dir / "gt.txt", [g.frame_index for g in gts], [(g.cx, g.cy, g.w, g.h) for g in gts])
    except OSError as e:
        raise DataIOError(f"cannot write sequence {seq_dir}: {e}") from e


def _read_lines(path):
    try:
        return Path(path).read_text().splitlines()
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e


def read_sequence(seq_dir) -> SequenceData:
    seq_dir = Path(seq_dir)
    frames, windows = [], []
    for ln in _read_lines(seq_dir / "frames.idx"):
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 4:
            raise DataIOError(f"{seq_dir / 'frames.idx'}: malformed line {ln!r}")
        k, t0, t1, rel = int(parts[0]), int(parts[1]), int(parts[2]), parts[3]
        if k != len(frames):
            raise DataIOError(f"{seq_dir}: frame index {k} out of order")
        frames.append(read_ppm(seq_dir / rel))
        windows.append(ExposureWindow(t0, t1))
    if not frames:
        raise DataIOError(f"{seq_dir}: no frames")
    check_windows(windows)

    lines = _read_lines(seq_dir / "events.txt")
    H, W = frames[0].shape[:2]
    duration = windows[-1].t_end
    if lines and lines[0].startswith("# sensor"):
        head = lines[0].split()
        W, H, duration = int(head[2]), int(head[3]), int(head[5])
    body = [ln for ln in lines if ln.strip() and not ln.startswith("#")]
    if body:
        try:
            ev = np.array([[int(v) for v in ln.split()] for ln in body], dtype=np.int64)
        except ValueError as e:
            raise DataIOError(f"{seq_dir / 'events.txt'}: malformed event line ({e})") from e
        if ev.shape[1] != 4:
            raise DataIOError(f"{seq_dir / 'events.txt'}: expected `t x y p` lines")
        stream = EventStream(ev[:, 0], ev[:, 1], ev[:, 2], ev[:, 3], (W, H), duration)
    else:
        stream = EventStream.empty((W, H), duration)

    idx, boxes = read_boxes(seq_dir / "gt.txt")
    gts = [GroundTruthBox(int(k), *b) for k, b in zip(idx, boxes)]
    return SequenceData(seq_dir.name, frames, windows, stream, gts)


MANIFEST = "manifest.txt"


def write_manifest(root, entries):
    """``entries``: (sequence name, split) pairs."""
    with open(Path(root) / MANIFEST, "w") as f:
        for name, split in entries:
            f.write(f"{name} {split}\n")


def read_manifest(root, split=None):
    root = Path(root)
    path = root / MANIFEST
    if path.exists():
        entries = [tuple(ln.split()[:2]) for ln in _read_lines(path) if ln.strip()]
    elif (root / "frames.idx").exists():
        return [root]
    else:
        entries = [(d, "train") for d in sorted(os.listdir(root)) if (root / d / "frames.idx").exists()]
    if not entries:
        raise DataIOError(f"{root}: no sequences found")
    return [root / name for name, s in entries if split is None or s == split]
