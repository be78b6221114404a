"""Online single-object tracking over a frame + event sequence."""
from __future__ import annotations

import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..events import SEARCH_CONTEXT, TEMPLATE_CONTEXT, SequenceData, crop_patch, write_pgm
from .losses import cosine_window, decode_bbox
from .metrics import TrackRecord
from .model import Model, forward
from .train import apply_modality, normalize

MIN_SIZE = 1.0  # pixels


def clip_box(box, width, height):
    """Keep the center inside the image and both extents in [MIN_SIZE, image size]."""
    cx = float(np.clip(box[0], 0.0, width))
    cy = float(np.clip(box[1], 0.0, height))
    w = float(np.clip(box[2], MIN_SIZE, width))
    h = float(np.clip(box[3], MIN_SIZE, height))
    return np.array([cx, cy, w, h])


def track_sequence(model: Model, seq: SequenceData, init_box=None, window=False, modality="fused",
                   dump_maps: Optional[str] = None) -> List[TrackRecord]:
    """Track from frame 0's box; one record per later frame (no template update)."""
    cfg = model.cfg
    dtype = next(iter(model.params.values())).dtype
    W, H = seq.size
    box = seq.gts[0].as_array() if init_box is None else np.asarray(init_box, dtype=np.float64)
    ev0 = seq.event_frame(0)
    rgb_z = normalize(crop_patch(seq.frames[0], box, TEMPLATE_CONTEXT, cfg.template_size))[None]
    ev_z = normalize(crop_patch(ev0, box, TEMPLATE_CONTEXT, cfg.template_size))[None]
    win = cosine_window(cfg.grid) if window else None
    if dump_maps:
        Path(dump_maps).mkdir(parents=True, exist_ok=True)

    gt_by_frame = {g.frame_index: g.as_array() for g in seq.gts}
    records = []
    for k in range(1, len(seq.frames)):
        t0 = time.perf_counter()
        rgb_x, geo = crop_patch(seq.frames[k], box, SEARCH_CONTEXT, cfg.search_size, return_geometry=True)
        ev_x = crop_patch(seq.event_frame(k), box, SEARCH_CONTEXT, cfg.search_size)
        inputs = {"rgb_z": rgb_z, "event_z": ev_z, "rgb_x": normalize(rgb_x)[None], "event_x": normalize(ev_x)[None]}
        inputs = {n: v.astype(dtype) for n, v in apply_modality(inputs, modality).items()}
        out, _ = forward(model, inputs, train=False)
        single = type(out)(out.cls[0], out.offset[0], out.size[0])
        pred = decode_bbox(single, win)
        box = clip_box(geo.box_to_image(pred.as_array()), W, H)
        elapsed = time.perf_counter() - t0
        if dump_maps:
            write_pgm(Path(dump_maps) / f"{k:05d}.pgm", np.round(np.clip(single.cls, 0, 1) * 255).astype(np.uint8))
        gt = gt_by_frame.get(k)
        records.append(TrackRecord(k, box.copy(), None if gt is None else gt, elapsed))
    return records
