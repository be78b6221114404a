"""Acceptance suite: one PASS/FAIL line per criterion, printed at the end of the run.

Tolerances and budgets are fixed; a criterion that misses stays red.
"""
import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

import gradcheck
from fetrack import blocks
from fetrack.blocks import TokenSeq
from fetrack.cli import main
from fetrack.config import RunConfig
from fetrack.dataset import generate
from fetrack.numerics import Rng
from fetrack.ssm import EXACT, SIMPLIFIED, selective_scan_parallel, selective_scan_seq, zoh_discretize
from fetrack.ssm.zoh import PHI_TAYLOR
from fetrack.tracker import bench
from fetrack.tracker.losses import BBox, LossWeights, focal_loss, giou_loss, make_cls_target, total_loss
from fetrack.tracker.metrics import TrackRecord, eval_metrics, mean_iou
from fetrack.tracker.model import PAPER, init_model
from fetrack.tracker.track import track_sequence
from fetrack.tracker.train import train
from oracles import corner_iou, dense_scan, hand_metrics, random_scan, zoh_scalar

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def rel(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1.0))


def test_scan_oracle_equivalence(acceptance):
    rng = Rng(2024)
    t0 = time.perf_counter()
    worst = {np.float64: 0.0, np.float32: 0.0}
    for k in range(100):
        L, D, N = int(rng.integers(1, 65)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        dtype = np.float64 if k % 2 == 0 else np.float32
        p, x = random_scan(rng, L, D, N, dtype)
        ys = selective_scan_seq(p, x).y
        yp = selective_scan_parallel(p, x).y
        yd, _ = dense_scan(p, x)
        worst[dtype] = max(worst[dtype], rel(ys, yd), rel(yp, yd), rel(yp, ys))
    dt = time.perf_counter() - t0
    ok = worst[np.float64] <= 1e-12 and worst[np.float32] <= 1e-5 and dt < 10.0
    acceptance("scan oracle equivalence", ok,
               f"64-bit {worst[np.float64]:.1e} <= 1e-12, 32-bit {worst[np.float32]:.1e} <= 1e-5, {dt:.1f} s < 10 s")
    assert ok


def test_zoh_correctness(acceptance):
    t0 = time.perf_counter()
    a_grid = -np.concatenate([np.logspace(-8, 1, 37), [PHI_TAYLOR * 0.999, PHI_TAYLOR * 1.001]])
    d_grid = np.logspace(-6, 0, 25)
    worst = 0.0
    A, B = a_grid[:, None], np.ones((1, 1))
    for dt in d_grid:
        # one call per delta covers the whole a grid; rows are channels
        _, b_bar = zoh_discretize(A, B, np.full((1, len(a_grid)), dt))
        for i, a in enumerate(a_grid):
            ref = zoh_scalar(a, dt)[1]
            worst = max(worst, abs(b_bar[0, i, 0] - ref) / abs(ref))
    deltas = 10.0 ** -np.arange(1, 7)
    diffs = [abs(zoh_discretize(np.array([[-2.0]]), np.array([[1.0]]), np.array([[d]]), EXACT)[1]
                 - zoh_discretize(np.array([[-2.0]]), np.array([[1.0]]), np.array([[d]]), SIMPLIFIED)[1]).item()
             for d in deltas]
    slope = np.polyfit(np.log10(deltas), np.log10(diffs), 1)[0]
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and abs(slope - 2.0) < 0.05 and dt < 5.0
    acceptance("ZOH correctness", ok, f"max rel {worst:.1e} <= 1e-12, convergence slope {slope:.3f} ~ 2, {dt:.1f} s < 5 s")
    assert ok


def test_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst = {}
    for name, case in gradcheck.CASES.items():
        for seed in range(20):
            errs = case(seed)
            worst[name] = max(worst.get(name, 0.0), max(errs.values()))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and dt < 120.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance("gradient suite", ok, f"{detail} (<= 1e-4, 20 seeds), {dt:.0f} s < 120 s")
    assert ok


def test_residual_identities(acceptance):
    rng = Rng(7)
    h = rng.normal((2, 12, 8))
    vim = {k: np.zeros_like(v) for k, v in blocks.init_vim_block(rng, 8, 4, 4, 2, 1, np.float64).items()}
    out = blocks.vim_block_forward(TokenSeq(h, 4), vim)
    fr, fe = TokenSeq(rng.normal((2, 10, 8)), 4), TokenSeq(rng.normal((2, 10, 8)), 4)
    fus = {k: np.zeros_like(v) for k, v in blocks.init_fusion(rng, 8, 4, 4, 2, 1, np.float64).items()}
    a, b = blocks.fusion_mamba(fr, fe, fus)
    ok = (np.array_equal(out.data, h) and np.array_equal(a.data, fr.data) and np.array_equal(b.data, fe.data))
    acceptance("residual identities", ok, "zero Vim block and zero fusion block, bitwise")
    assert ok


def test_loss_contracts(acceptance):
    unit = BBox(0, 0, 1, 1)
    giou = [giou_loss(unit, BBox(x, 0, 1, 1)) for x in (0, 1, 2)]
    giou_ok = all(abs(g - e) <= 1e-9 for g, e in zip(giou, (0.0, 1.0, 4.0 / 3.0)))
    gt = BBox(0.47, 0.55, 0.2, 0.3)
    target = make_cls_target(gt, 8)
    pred_map = np.clip(target + Rng(3).uniform(0, 0.3, (8, 8)), 0.01, 0.99)
    pred = BBox(0.5, 0.5, 0.25, 0.22)
    parts = (focal_loss(pred_map, target), float(np.abs(pred.as_array() - gt.as_array()).mean()), giou_loss(pred, gt))
    w = LossWeights()
    weights_ok = ((w.focal, w.l1, w.giou) == (1.0, 14.0, 1.0)
                  and total_loss(pred_map, target, pred, gt) == parts[0] + 14.0 * parts[1] + parts[2])
    perfect = make_cls_target(BBox(0.53, 0.4, 0.2, 0.2), 16)
    focal = focal_loss((perfect == 1.0).astype(float), perfect)
    ok = giou_ok and weights_ok and focal <= 1e-5
    acceptance("loss contracts", ok, f"giou {giou_ok}, weights (1,14,1) exact {weights_ok}, perfect focal {focal:.1e}")
    assert ok


def test_metric_oracle(acceptance):
    from test_metrics import fixture_records

    recs = fixture_records()
    ious = [corner_iou(r.pred, r.gt) for r in recs]
    err = [float(np.hypot(*(r.pred[:2] - r.gt[:2]))) for r in recs]
    nerr = [float(np.hypot((r.pred[0] - r.gt[0]) / r.gt[2], (r.pred[1] - r.gt[1]) / r.gt[3])) for r in recs]
    got, expected = eval_metrics(recs), hand_metrics(ious, err, nerr)
    diff = max(abs(a - b) for a, b in zip(got, expected))
    ok = len(recs) == 10 and diff <= 1e-9
    acceptance("metric oracle", ok, f"SR/PR/NPR {got.sr:.3f}/{got.pr:.3f}/{got.npr:.3f}, max diff {diff:.1e} <= 1e-9")
    assert ok


def toy_data(cfg):
    train_seqs = [s for _, _, s, _ in generate(cfg.synth, cfg.data["sequences"], 0, cfg.data["seed"])]
    test_cfg = dataclasses.replace(cfg.synth, frames=50)
    test_seqs = [s for _, _, s, _ in generate(test_cfg, 0, cfg.data["test_sequences"], cfg.data["seed"] + 1)]
    return train_seqs, test_seqs


@pytest.mark.slow
def test_toy_training(acceptance):
    cfg = RunConfig.load(CONFIGS / "toy.cfg")
    train_seqs, test_seqs = toy_data(cfg)
    assert sum(len(s.frames) for s in train_seqs) == 200
    t0 = time.perf_counter()
    scores = {}
    for modality in ("rgb", "event", "fused"):
        for seed in range(3):
            settings = dataclasses.replace(cfg.train, seed=seed, modality=modality)
            model = train(train_seqs, cfg.model, settings).model
            ious = [mean_iou(track_sequence(model, s, modality=modality)) for s in test_seqs]
            scores.setdefault(modality, []).append(float(np.mean(ious)))
    dt = time.perf_counter() - t0
    med = {k: float(np.median(v)) for k, v in scores.items()}
    single = max(med["rgb"], med["event"])
    ok = med["fused"] >= 0.5 and med["fused"] >= single - 0.02 and dt <= 1800.0
    runs = "; ".join(f"{k} " + " ".join(f"{v:.3f}" for v in vs) for k, vs in scores.items())
    acceptance("toy training", ok, f"median IoU rgb {med['rgb']:.3f}, event {med['event']:.3f}, fused {med['fused']:.3f} "
                                   f"(>= 0.5 and >= {single - 0.02:.3f}), {dt / 60:.1f} min <= 30 min [{runs}]")
    assert ok


def test_determinism(acceptance, tmp_path):
    from test_cli import TINY_CFG, tree_equal

    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    codes = []
    for name in ("a", "b"):
        codes.append(main(["synth", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "11"]))
        codes.append(main(["train", "--config", str(cfg), "--data", str(tmp_path / "a"),
                           "--out", str(tmp_path / f"{name}.ckpt"), "--seed", "11"]))
    synth_same = tree_equal(tmp_path / "a", tmp_path / "b")
    train_same = ((tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
                  and (tmp_path / "a.loss.txt").read_bytes() == (tmp_path / "b.loss.txt").read_bytes())
    ok = codes == [0] * 4 and synth_same and train_same
    acceptance("determinism", ok, f"synth tree identical {synth_same}, checkpoint and loss log identical {train_same}")
    assert ok


def test_bench_report(acceptance):
    n = bench.count_params(init_model(RunConfig.load(CONFIGS / "paper.cfg").model, 0))
    f6, f12 = bench.flops_breakdown(PAPER.with_depth(6)), bench.flops_breakdown(PAPER.with_depth(12))
    f9 = bench.flops_breakdown(PAPER.with_depth(9))
    fixed = ("embed", "fusion", "head")
    linear = (f12["backbone"] == 2 * f6["backbone"] and all(f6[k] == f12[k] for k in fixed)
              and f12["total"] - f9["total"] == f9["total"] - f6["total"])
    ok = 4_000_000 <= n <= 14_000_000 and linear
    acceptance("bench report", ok, f"params {n / 1e6:.2f}M in [4M, 14M] (reference {bench.REFERENCE_PARAMS}M), "
                                   f"depth-dependent FLOPs 12/6 = {f12['backbone'] / f6['backbone']:.1f}")
    assert ok
