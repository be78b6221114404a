"""Command-line entry point: synth, train, track, eval, bench, selftest.

Exit codes: 0 ok, 1 validation failure, 2 I/O error, 3 numeric error.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .dataset import load_split, write_dataset
from .errors import DataIOError, DomainError, FetrackError
from .events import read_boxes, read_manifest, read_sequence, write_boxes
from .numerics import dtype_for
from .tracker import bench
from .tracker.metrics import TrackRecord, eval_metrics
from .tracker.model import init_model
from .tracker.track import track_sequence
from .tracker.train import MODALITY_CHOICES, train


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


def cmd_synth(args):
    cfg = RunConfig.load(args.config).override(**{"data.seed": args.seed})
    if cfg.synth.frames == 1:
        _warn("frames = 1 gives sequences with no trackable frames")
    d = cfg.data
    write_dataset(args.out, cfg.synth, d["sequences"], d["test_sequences"], d["seed"], report=print)
    return 0


def cmd_train(args):
    cfg = RunConfig.load(args.config).override(**{
        "train.seed": args.seed, "train.steps": args.steps, "train.modality": args.modality})
    settings = cfg.train
    seqs = load_split(args.data, "train")
    if not seqs:
        raise DataIOError(f"{args.data}: no training sequences")
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".loss.txt")
    try:
        with open(log_path, "w") as log:
            res = train(seqs, cfg.model, settings, dtype=dtype_for(args.precision), log_file=log)
    except OSError as e:
        raise DataIOError(f"cannot write loss log {log_path}: {e}") from e
    meta = {"steps": settings.steps, "seed": settings.seed, "modality": settings.modality,
            "batch": settings.batch, "lr": settings.lr, "weight_decay": settings.weight_decay}
    checkpoint.save(out, res.model, meta)
    if res.losses:
        k = min(100, len(res.losses))
        print(f"trained {settings.steps} steps: first-{k} mean loss {np.mean(res.losses[:k]):.4f}, "
              f"last-{k} mean loss {np.mean(res.losses[-k:]):.4f}")
    print(f"checkpoint {out}\nloss log {log_path}")
    return 0


def _write_results(path, records):
    path = Path(path)
    try:
        write_boxes(path, [r.frame_index for r in records], [r.pred for r in records])
        with open(path.with_suffix(".time"), "w") as f:
            for r in records:
                f.write(f"{r.frame_index} {r.seconds:.6f}\n")
    except OSError as e:
        raise DataIOError(f"cannot write results {path}: {e}") from e


def cmd_track(args):
    model, meta = checkpoint.load(args.checkpoint)
    model = model.astype(dtype_for(args.precision))
    modality = args.modality or meta.get("modality", "fused")
    window = args.window if args.window is not None else RunConfig.load(args.config).track["window"]
    src = Path(args.sequence)
    single = (src / "frames.idx").exists()
    paths = [src] if single else read_manifest(src, args.split)
    if not paths:
        raise DataIOError(f"{src}: no sequences in split {args.split!r}")

    def run(p):
        dump = None
        if args.dump_maps:
            dump = Path(args.dump_maps) if single else Path(args.dump_maps) / p.name
        return p, track_sequence(model, read_sequence(p), window=window, modality=modality,
                                 dump_maps=dump and str(dump))

    workers = max(1, min(args.workers, len(paths)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, paths))
    else:
        results = [run(p) for p in paths]

    out = Path(args.out)
    if not single:
        out.mkdir(parents=True, exist_ok=True)
    for p, records in results:
        _write_results(out if single else out / f"{p.name}.txt", records)
        secs = sum(r.seconds for r in records)
        fps = len(records) / secs if secs > 0 else float("nan")
        print(f"{p.name}: {len(records)} frames, {fps:.1f} fps")
    return 0


def _load_pairs(results, gt):
    """(pred file, gt file, time file) triples for a single sequence or a directory."""
    results, gt = Path(results), Path(gt)
    if results.is_dir():
        pairs = []
        for f in sorted(results.glob("*.txt")):
            g = gt / f.stem / "gt.txt"
            if not g.exists():
                raise DataIOError(f"no ground truth for {f.stem} under {gt}")
            pairs.append((f, g, f.with_suffix(".time")))
        return pairs
    g = gt / "gt.txt" if gt.is_dir() else gt
    return [(results, g, results.with_suffix(".time"))]


def cmd_eval(args):
    records = []
    for pred_path, gt_path, time_path in _load_pairs(args.results, args.gt):
        pidx, pboxes = read_boxes(pred_path)
        gidx, gboxes = read_boxes(gt_path)
        gt_map = dict(zip(gidx.tolist(), gboxes))
        times = {}
        if time_path.exists():
            for ln in time_path.read_text().splitlines():
                if ln.strip():
                    k, s = ln.split()
                    times[int(k)] = float(s)
        for k, b in zip(pidx.tolist(), pboxes):
            if k not in gt_map:
                raise DomainError(f"{pred_path}: frame {k} has no ground truth")
            records.append(TrackRecord(k, b, gt_map[k], times.get(k, 0.0)))
    m = eval_metrics(records)
    secs = sum(r.seconds for r in records)
    fps = f"{len(records) / secs:.2f}" if secs > 0 else "n/a"
    params = flops = "n/a"
    if args.checkpoint:
        model, _ = checkpoint.load(args.checkpoint)
        params = str(bench.count_params(model))
        flops = str(bench.estimate_flops(model.cfg))
    print(f"sr = {m.sr:.3f}\npr = {m.pr:.3f}\nnpr = {m.npr:.3f}\nfps = {fps}\nparams = {params}\nflops = {flops}")
    return 0


def cmd_bench(args):
    if args.checkpoint:
        model, _ = checkpoint.load(args.checkpoint)
        cfg, n = model.cfg, bench.count_params(model)
    else:
        cfg = RunConfig.load(args.config).model
        n = bench.count_params(init_model(cfg, 0))
    fl = bench.flops_breakdown(cfg)
    print(f"params = {n}")
    print(f"params_millions = {n / 1e6:.3f}")
    print(f"params_megabytes_fp32 = {bench.params_megabytes(n):.3f}")
    print(f"reference_params = {bench.REFERENCE_PARAMS} (millions or megabytes; unit not stated)")
    for k in ("embed", "backbone", "fusion", "head"):
        print(f"flops.{k} = {fl[k]}")
    print(f"flops = {fl['total']}")
    print(f"gflops = {fl['total'] / 1e9:.3f}")
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    failures = 0
    for name, ok, detail in run_selftest(workers=args.workers):
        print(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
        failures += not ok
    print(f"{failures} failure(s)")
    return 1 if failures else 0


def build_parser():
    p = argparse.ArgumentParser(prog="fetrack", description="Frame + event single-object tracking (toy scale).")
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)
    p.add_argument("--workers", type=int, default=1)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a toy model")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="loss log path (default: <out>.loss.txt)")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--modality", choices=MODALITY_CHOICES)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("track", help="track one sequence or every sequence of a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sequence", required=True, help="sequence directory or dataset root")
    s.add_argument("--out", required=True, help="results file (sequence) or directory (dataset)")
    s.add_argument("--config")
    s.add_argument("--split", default="test")
    s.add_argument("--modality", choices=MODALITY_CHOICES)
    s.add_argument("--window", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--dump-maps", help="write per-frame score maps as PGM files here")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="score results against ground truth")
    s.add_argument("--results", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="parameter count and FLOP estimate")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--config")
    g.add_argument("--checkpoint")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("selftest", help="run the built-in invariant checks (64-bit)")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FetrackError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
