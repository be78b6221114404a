"""Model assembly, bench audit, checkpoint, config, dataset, training and tracking."""
import math

import numpy as np
import pytest

from fetrack import blocks, checkpoint
from fetrack.config import DEFAULTS, RunConfig
from fetrack.dataset import generate, write_dataset
from fetrack.errors import ConfigError, DataIOError
from fetrack.events import SequenceData, read_manifest
from fetrack.synth import SynthConfig
from fetrack.tracker import bench
from fetrack.tracker.model import PAPER, TOY, ModelConfig, forward, init_model
from fetrack.tracker.track import track_sequence
from fetrack.tracker.train import TrainSettings, apply_modality, dihedral, neutral_like, train

TINY = ModelConfig(channels=8, depth=1, d_state=2, patch=8, template_size=16, search_size=32, head_layers=2)


def closed_form_params(cfg):
    """Parameter count written out shape by shape, independent of the init code."""
    C, E, N, R, K = cfg.channels, cfg.expand * cfg.channels, cfg.d_state, cfg.rank, cfg.d_conv
    ssm = K * E + E * (R + 2 * N) + R * E + E + E * N + E  # conv, proj, dt_proj, dt_bias, A_log, D
    vim = 2 * C + 2 * (C * E + E) + 2 * ssm + E * C + C
    fusion = 2 * (2 * C + 2 * (C * E + E) + ssm + E * C + C)
    patch_dim = cfg.patch ** 2 * cfg.in_chans
    embed = patch_dim * C + C + (cfg.n_template + cfg.n_search) * C
    chans = [2 * C]
    for _ in range(cfg.head_layers):
        chans.append(max(1, chans[-1] // 2))
    head = 0
    for out in (1, 2, 2):
        head += sum(9 * a * b + 2 * b for a, b in zip(chans[:-1], chans[1:])) + chans[-1] * out + out
    return 2 * (embed + cfg.depth * vim) + fusion + head


def seqs(n=2, frames=6, seed=0):
    return [s for _, _, s, _ in generate(SynthConfig(frames=frames), n, 0, seed)]


# ---------------------------------------------------------------- bench

@pytest.mark.parametrize("cfg", [TOY, TINY, PAPER])
def test_param_count_shape_audit(cfg):
    assert bench.count_params(init_model(cfg, 0)) == closed_form_params(cfg)


def test_paper_scale_in_range():
    n = closed_form_params(PAPER)
    assert 4_000_000 <= n <= 14_000_000


def test_backbone_doubles_with_depth():
    def backbone(cfg):
        return sum(v.size for k, v in init_model(cfg, 0).params.items() if ".blocks." in k)

    assert backbone(TOY.with_depth(4)) == 2 * backbone(TOY.with_depth(2))
    a, b = bench.flops_breakdown(PAPER.with_depth(6)), bench.flops_breakdown(PAPER.with_depth(12))
    assert b["backbone"] == 2 * a["backbone"]
    assert all(a[k] == b[k] for k in ("embed", "fusion", "head"))


def test_flops_affine_in_depth():
    f = [bench.estimate_flops(PAPER.with_depth(d)) for d in (6, 9, 12)]
    assert f[2] - f[1] == f[1] - f[0] > 0


def test_flops_counts_block_by_hand():
    # one Vim block at T tokens: in/out projections plus two SSM paths
    cfg = TINY
    T, C, E, N, R, K = cfg.n_template + cfg.n_search, cfg.channels, cfg.width, cfg.d_state, cfg.rank, cfg.d_conv
    path = T * E * (K + R + 2 * N + R + 3 * N + 1)
    block = 3 * T * C * E + 2 * path
    assert bench.flops_breakdown(cfg)["backbone"] == 2 * 2 * cfg.depth * block


# ---------------------------------------------------------------- model

def test_forward_shapes_and_ranges(rng):
    m = init_model(TINY, 0, np.float64)
    inputs = {f"{mod}_{p}": rng.normal((3, s, s, 3)) for mod in ("rgb", "event") for p, s in (("z", 16), ("x", 32))}
    out, _ = forward(m, inputs)
    assert out.cls.shape == (3, 4, 4) and out.offset.shape == (3, 4, 4, 2) and out.size.shape == (3, 4, 4, 2)
    assert np.all((out.cls > 0) & (out.cls < 1)) and np.all(out.size > 0)


def test_init_is_seeded():
    a, b, c = init_model(TINY, 1), init_model(TINY, 1), init_model(TINY, 2)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["rgb.patch.w"], c.params["rgb.patch.w"])


def test_rgb_branch_ignores_event_with_zero_fusion(rng):
    m = init_model(TINY, 0, np.float64)
    fusion = {k[7:]: np.zeros_like(v) for k, v in m.params.items() if k.startswith("fusion.")}
    f_rgb = rng.normal((2, 20, 8))
    ev = [rng.normal((2, 20, 8)), np.full((2, 20, 8), 0.1)]
    outs = [blocks.fusion_fwd(f_rgb, e, fusion)[0][0] for e in ev]
    np.testing.assert_array_equal(outs[0], outs[1])


def test_apply_modality(rng):
    inputs = {k: rng.normal((1, 4, 4, 3)).astype(np.float32) for k in ("rgb_z", "rgb_x", "event_z", "event_x")}
    assert apply_modality(inputs, "fused") is inputs
    rgb = apply_modality(inputs, "rgb")
    assert rgb["rgb_x"] is inputs["rgb_x"]
    np.testing.assert_array_equal(rgb["event_x"], neutral_like(inputs["event_x"]))
    ev = apply_modality(inputs, "event")
    assert ev["event_z"] is inputs["event_z"] and not np.array_equal(ev["rgb_z"], inputs["rgb_z"])


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    m = init_model(TINY, 3)
    m.buffers["head.cls.0.running_mean"][:] = np.arange(8, dtype=np.float32) / 7
    checkpoint.save(tmp_path / "m.ckpt", m, {"steps": 5})
    back, meta = checkpoint.load(tmp_path / "m.ckpt")
    assert meta == {"steps": 5} and back.cfg == m.cfg
    for src, dst in ((m.params, back.params), (m.buffers, back.buffers)):
        assert src.keys() == dst.keys()
        for k in src:
            assert src[k].dtype == dst[k].dtype
            assert src[k].tobytes() == dst[k].tobytes()
    checkpoint.save(tmp_path / "again.ckpt", back, {"steps": 5})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    checkpoint.save(tmp_path / "m.ckpt", init_model(TINY, 0))
    data = (tmp_path / "m.ckpt").read_bytes()
    for name, blob in (("magic", b"XXXX" + data[4:]), ("short", data[:-3]), ("long", data + b"\0")):
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(DataIOError):
            checkpoint.load(tmp_path / name)
    with pytest.raises(DataIOError):
        checkpoint.load(tmp_path / "missing.ckpt")


# ---------------------------------------------------------------- config

def test_config_defaults_and_parse():
    cfg = RunConfig.parse("model.channels = 16\n# comment\ntrain.steps = 7  # inline\nsynth.hdr = off\n")
    assert cfg.model.channels == 16 and cfg.train.steps == 7 and cfg.synth.hdr is False
    assert cfg.model.depth == DEFAULTS["model.depth"]
    assert RunConfig.parse(cfg.dumps()).values == cfg.values


@pytest.mark.parametrize("text", ["model.chanels = 4", "model.channels = x", "model.depth = 0",
                                  "train.steps = 1\ntrain.steps = 2", "no equals sign", "synth.theta = 0",
                                  "model.zoh_mode = euler", "train.modality = audio"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        RunConfig.parse(text)


def test_config_override_and_missing_file(tmp_path):
    assert RunConfig().override(**{"train.seed": 5, "train.steps": None}).train.seed == 5
    with pytest.raises(ConfigError):
        RunConfig().override(**{"train.sed": 5})
    with pytest.raises(DataIOError):
        RunConfig.load(tmp_path / "none.cfg")


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.cfg"))
    assert files
    for f in files:
        RunConfig.load(f)
    paper = RunConfig.load(root / "paper.cfg").model
    assert 4_000_000 <= closed_form_params(paper) <= 14_000_000


# ---------------------------------------------------------------- dataset

def test_dataset_layout(tmp_path):
    entries = write_dataset(tmp_path / "d", SynthConfig(frames=5), 2, 1, 7)
    assert entries == [("train_000", "train"), ("train_001", "train"), ("test_000", "test")]
    assert [p.name for p in read_manifest(tmp_path / "d", "test")] == ["test_000"]
    for name, _ in entries:
        d = tmp_path / "d" / name
        n_frames = len((d / "frames.idx").read_text().splitlines())
        n_gt = len((d / "gt.txt").read_text().splitlines())
        assert n_frames == n_gt == 5 and (d / "events.txt").exists()


def test_sequences_have_distinct_seeds():
    a, b = seqs(2)
    assert not np.array_equal(a.frames[0], b.frames[0])


# ---------------------------------------------------------------- training

def test_zero_steps_returns_init():
    res = train(seqs(), TINY, TrainSettings(steps=0, batch=2, seed=4))
    init = init_model(TINY, 4)
    assert res.losses == []
    assert all(np.array_equal(res.model.params[k], init.params[k]) for k in init.params)


def test_training_is_deterministic(tmp_path):
    data = seqs()
    runs = []
    for k in range(2):
        with open(tmp_path / f"log{k}", "w") as log:
            runs.append(train(data, TINY, TrainSettings(steps=4, batch=2, seed=1), log_file=log))
    assert runs[0].losses == runs[1].losses
    assert all(np.array_equal(runs[0].model.params[k], runs[1].model.params[k]) for k in runs[0].model.params)
    lines = (tmp_path / "log0").read_text().splitlines()
    assert [int(ln.split()[0]) for ln in lines] == [1, 2, 3, 4]
    assert [float(ln.split()[1]) for ln in lines] == pytest.approx(runs[0].losses, rel=1e-6)


def test_training_reduces_loss_on_one_sequence():
    res = train(seqs(1, 8), TINY, TrainSettings(steps=60, batch=4, seed=0, lr=2e-3))
    assert np.mean(res.losses[-10:]) < 0.7 * np.mean(res.losses[:10])


def test_dihedral_moves_target_with_crops():
    # a marker pixel at the target center must stay under the transformed target
    size = 16
    for k in range(8):
        crop = np.zeros((size, size, 3))
        crop[3, 11] = 1.0  # row 3, column 11
        target = np.array([11.5 / size, 3.5 / size, 0.25, 0.5])
        (a, b), t = dihedral((crop, crop.copy()), target, k)
        row, col = np.argwhere(a[..., 0] == 1.0)[0]
        assert (col + 0.5) / size == pytest.approx(t[0]) and (row + 0.5) / size == pytest.approx(t[1])
        assert np.array_equal(a, b)
        assert sorted(t[2:]) == [0.25, 0.5] and (t[2] == 0.25) == (k < 4)


@pytest.mark.parametrize("modality", ["rgb", "event"])
def test_single_modality_training_runs(modality):
    res = train(seqs(1, 4), TINY, TrainSettings(steps=2, batch=2, modality=modality))
    assert len(res.losses) == 2 and all(math.isfinite(v) for v in res.losses)


# ---------------------------------------------------------------- tracking

def test_track_contract(tmp_path):
    seq = seqs(1, 7)[0]
    m = init_model(TINY, 0)
    recs = track_sequence(m, seq, dump_maps=str(tmp_path / "maps"))
    assert [r.frame_index for r in recs] == list(range(1, 7))
    assert all(r.pred[2] > 0 and r.pred[3] > 0 for r in recs)
    np.testing.assert_array_equal(recs[0].gt, seq.gts[1].as_array())
    assert len(list((tmp_path / "maps").glob("*.pgm"))) == 6
    again = track_sequence(m, seq)
    assert all(np.array_equal(a.pred, b.pred) for a, b in zip(recs, again))


def test_track_single_frame():
    seq = seqs(1, 1)[0]
    assert track_sequence(init_model(TINY, 0), SequenceData(seq.name, seq.frames, seq.windows, seq.stream,
                                                            seq.gts)) == []
