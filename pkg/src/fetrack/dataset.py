"""Synthetic train/test datasets, in memory or in the on-disk manifest layout."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataIOError
from .events import SequenceData, read_manifest, read_sequence, write_manifest, write_sequence
from .synth import SynthConfig, synth_generate


def sequence_seed(seed, index):
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(index),)).generate_state(1)[0])


def sequence_plan(n_train, n_test):
    names = [(f"train_{k:03d}", "train") for k in range(n_train)]
    names += [(f"test_{k:03d}", "test") for k in range(n_test)]
    return names


def generate(cfg: SynthConfig, n_train, n_test, seed):
    """Yields ``(name, split, SequenceData, hdr flags)``; sequence k uses its own derived seed."""
    for k, (name, split) in enumerate(sequence_plan(n_train, n_test)):
        s = synth_generate(cfg, sequence_seed(seed, k))
        yield name, split, SequenceData(name, s.frames, s.windows, s.stream, s.gts), s.hdr


def write_dataset(out_dir, cfg: SynthConfig, n_train, n_test, seed, report=None):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataIOError(f"cannot create {out}: {e}") from e
    entries = []
    for name, split, seq, hdr in generate(cfg, n_train, n_test, seed):
        write_sequence(out / name, seq.frames, seq.windows, seq.stream, seq.gts)
        entries.append((name, split))
        if report is not None:
            report(f"{name} {split} frames={len(seq.frames)} events={len(seq.stream)} hdr_frames={sum(hdr)}")
    write_manifest(out, entries)
    return entries


def load_split(root, split=None):
    return [read_sequence(p) for p in read_manifest(root, split)]
