"""Training: losses, configs, batching, corpora, stage chaining, freezes."""

import csv
import math
import re

import numpy as np
import pytest
import torch

from devc.errors import ConfigError, GeometryError, NumericError
from devc.pipeline import CodecConfig, build_models, save_checkpoint
from devc.training import (
    TrainConfig,
    lambda_at,
    load_dataset,
    load_vimeo_triplets,
    make_corpus,
    make_training_batch,
    parse_train_config,
    rd_loss,
    run_stage,
    train_stage,
    translation_pair,
)

torch.set_num_threads(1)


# --- rd_loss ---


def test_rd_loss_examples():
    x = torch.zeros(1, 1, 4, 4)
    same = torch.zeros(1, 1, 4, 4)
    # lambda = 0 -> pure rate term (bits per pixel)
    assert float(rd_loss(x, same + 0.3, 32.0, 0.0, "mse")) == pytest.approx(2.0)
    # zero distortion -> pure rate term
    assert float(rd_loss(x, same, 8.0, 1024.0, "mse")) == pytest.approx(0.5)
    # lambda=1024, D=0.01, R=0.5 bpp -> 10.74
    x_hat = torch.full((1, 1, 4, 4), 0.1)
    assert float(rd_loss(x, x_hat, 8.0, 1024.0, "mse")) == pytest.approx(10.74, rel=1e-6)


def test_rd_loss_msssim_kind():
    x = torch.rand(1, 1, 16, 16, dtype=torch.float64) * 0.5 + 0.25
    # identical inputs: D = 1 - 1 = 0 exactly
    assert float(rd_loss(x, x.clone(), 256.0, 128.0, "msssim")) == pytest.approx(1.0)
    noisy = (x + 0.1 * torch.rand_like(x)).clamp(0, 1)
    assert float(rd_loss(x, noisy, 0.0, 128.0, "msssim")) > 0


def test_rd_loss_bad_inputs():
    x = torch.zeros(1, 1, 4, 4)
    with pytest.raises(ConfigError):
        rd_loss(x, x, 1.0, 1.0, "l7")
    with pytest.raises(GeometryError):
        rd_loss(x, torch.zeros(1, 1, 4, 5), 1.0, 1.0, "mse")
    with pytest.raises(ConfigError):
        rd_loss(x, x, 1.0, -1.0, "mse")
    with pytest.raises(NumericError):
        rd_loss(x, x, -3.0, 1.0, "mse")
    with pytest.raises(NumericError):
        rd_loss(x, x, float("nan"), 1.0, "mse")


@pytest.mark.parametrize(
    "kind,side,noise,lam,eps",
    [("mse", 8, 0.05, 64.0, 1e-6), ("msssim", 16, 0.15, 256.0, 1e-5)],
)
def test_rd_loss_gradient_matches_central_differences(kind, side, noise, lam, eps):
    # the multiscale similarity needs at least 10 px per side, so that
    # distortion kind gets the next size up and a larger perturbation to
    # keep its gradients well away from the finite-difference noise floor
    torch.manual_seed(7)
    x = torch.rand(1, 1, side, side, dtype=torch.float64) * 0.6 + 0.2
    x_hat = (x + noise * torch.randn_like(x)).clamp(0.05, 0.95).requires_grad_(True)
    loss = rd_loss(x, x_hat, 12.0, lam, kind)
    loss.backward()
    grad = x_hat.grad.clone()
    rng = np.random.default_rng(8)
    for _ in range(20):
        i, j = int(rng.integers(0, side)), int(rng.integers(0, side))
        probe = x_hat.detach().clone()
        probe[0, 0, i, j] += eps
        up = float(rd_loss(x, probe, 12.0, lam, kind))
        probe[0, 0, i, j] -= 2 * eps
        down = float(rd_loss(x, probe, 12.0, lam, kind))
        numeric = (up - down) / (2 * eps)
        analytic = float(grad[0, 0, i, j])
        assert numeric == pytest.approx(analytic, rel=1e-3, abs=1e-9)


# --- TrainConfig ---


def test_train_config_validation():
    TrainConfig()  # defaults valid
    with pytest.raises(ConfigError):
        TrainConfig(stage="warmup")
    with pytest.raises(ConfigError):
        TrainConfig(lam=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lam=float("inf"))
    with pytest.raises(ConfigError):
        TrainConfig(lambda_schedule=((10, 4.0), (10, 2.0)))
    with pytest.raises(ConfigError):
        TrainConfig(lambda_schedule=((0, -1.0),))
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(crop=20)
    with pytest.raises(ConfigError):
        TrainConfig(crop=40)
    with pytest.raises(ConfigError):
        TrainConfig(max_steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(pairs=0)
    with pytest.raises(ConfigError):
        TrainConfig(crop=256, frame_size=160)


def test_schedule_mechanics():
    cfg = TrainConfig(stage="s3", lam=128.0, max_steps=100, crop=32, frame_size=64)
    assert cfg.schedule() == ((0, 512.0), (50, 128.0))
    assert lambda_at(cfg.schedule(), 0) == 512.0
    assert lambda_at(cfg.schedule(), 49) == 512.0
    assert lambda_at(cfg.schedule(), 50) == 128.0
    assert lambda_at(cfg.schedule(), 10_000) == 128.0
    flat = TrainConfig(stage="s1", lam=1024.0, crop=32, frame_size=64)
    assert flat.schedule() == ((0, 1024.0),)
    custom = TrainConfig(
        stage="s3", lambda_schedule=((0, 99.0), (5, 1.0)), crop=32, frame_size=64
    )
    assert custom.schedule() == ((0, 99.0), (5, 1.0))


def test_parse_train_config(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text(
        "# comment\n"
        "stage = s1\n"
        "lambda = 512\n"
        "crop=64\n"
        "frame_size = 96\n"
        "lambda_schedule = 0:2048, 50:512\n"
        "max_steps = 7\n"
    )
    cfg = parse_train_config(str(path))
    assert cfg.stage == "s1" and cfg.lam == 512.0 and cfg.crop == 64
    assert cfg.lambda_schedule == ((0, 2048.0), (50, 512.0))
    assert cfg.max_steps == 7
    assert parse_train_config(str(path), stage="s2").stage == "s2"

    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_knob = 3\n")
    with pytest.raises(ConfigError, match="unknown_knob"):
        parse_train_config(str(bad))
    bad.write_text("crop = soon\n")
    with pytest.raises(ConfigError, match="crop"):
        parse_train_config(str(bad))
    bad.write_text("just a line\n")
    with pytest.raises(ConfigError, match="key=value"):
        parse_train_config(str(bad))
    with pytest.raises(ConfigError):
        parse_train_config(str(tmp_path / "absent.cfg"))


# --- batching ---


def _pair_shift(pair):
    m = re.fullmatch(r"translate([+-]\d+)([+-]\d+)", pair.identifier)
    return int(m.group(1)), int(m.group(2))


def _shift_relation_holds(ref_y, tgt_y, dy, dx):
    h, w = tgt_y.shape
    i0, i1 = max(0, -dy), h - max(0, dy)
    j0, j1 = max(0, -dx), w - max(0, dx)
    return np.array_equal(
        tgt_y[i0:i1, j0:j1], ref_y[i0 + dy : i1 + dy, j0 + dx : j1 + dx]
    )


def test_training_batch_deterministic_under_seed():
    corpus = make_corpus("mixed", 4, size=96, seed=2)
    a = make_training_batch(corpus, 64, seed=5, batch_size=6)
    b = make_training_batch(corpus, 64, seed=5, batch_size=6)
    for pa, pb in zip(a, b):
        assert pa.identifier == pb.identifier
        assert np.array_equal(pa.ref.y, pb.ref.y)
        assert np.array_equal(pa.target.y, pb.target.y)
        assert np.array_equal(pa.ref.u, pb.ref.u)
    c = make_training_batch(corpus, 64, seed=6, batch_size=6)
    assert any(pa.identifier != pc.identifier for pa, pc in zip(a, c))


def test_training_batch_flip_mirrors_motion():
    pair = translation_pair(np.random.default_rng(5), 160)
    dx, dy = _pair_shift(pair)
    assert _shift_relation_holds(pair.ref.y, pair.target.y, dy, dx)
    batch = make_training_batch([pair], 64, seed=9, batch_size=16)
    flips = [p.identifier.endswith("|flip") for p in batch]
    assert any(flips) and not all(flips)
    for member, flipped in zip(batch, flips):
        shift_x = -dx if flipped else dx
        assert _shift_relation_holds(member.ref.y, member.target.y, dy, shift_x)


def test_training_batch_skips_undersized_pairs():
    small = make_corpus("static", 1, size=64, seed=0)[0]
    big = make_corpus("static", 1, size=160, seed=1)[0]
    with pytest.warns(UserWarning, match="smaller than crop"):
        batch = make_training_batch([small, big], 128, seed=0, batch_size=3)
    assert all(p.ref.height == 128 for p in batch)
    with pytest.raises(ConfigError):
        make_training_batch([small], 128, seed=0, batch_size=3)


# --- corpora and datasets ---


def test_corpus_kinds():
    translate = make_corpus("translate", 3, size=96, seed=4)
    for pair in translate:
        dx, dy = _pair_shift(pair)
        assert (dx, dy) != (0, 0) and dx % 2 == 0 and dy % 2 == 0
        assert _shift_relation_holds(pair.ref.y, pair.target.y, dy, dx)
        assert _shift_relation_holds(pair.ref.u, pair.target.u, dy // 2, dx // 2)
    static = make_corpus("static", 2, size=96, seed=4)
    for pair in static:
        assert pair.ref.y.tobytes() == pair.target.y.tobytes()
    cut = make_corpus("cut", 2, size=96, seed=4)
    for pair in cut:
        assert pair.identifier == "cut"
        assert pair.ref.y.tobytes() != pair.target.y.tobytes()
        assert pair.ref.u.tobytes() == pair.target.u.tobytes()
    mixed = make_corpus("mixed", 8, size=96, seed=4)
    kinds = ["cut" if p.identifier == "cut" else "translate" for p in mixed]
    assert kinds == ["translate", "translate", "translate", "cut"] * 2
    with pytest.raises(ConfigError):
        make_corpus("wobble", 2)


def test_load_dataset_sources(tmp_path):
    cfg = TrainConfig(stage="me", data="synthetic:translate", pairs=3, crop=32,
                      frame_size=96)
    assert len(load_dataset(cfg)) == 3
    with pytest.raises(ConfigError):
        load_dataset(TrainConfig(stage="me", data="synthetic:wobble", crop=32,
                                 frame_size=96))
    with pytest.raises(ConfigError):
        load_dataset(TrainConfig(stage="me", data="nowhere/missing", crop=32,
                                 frame_size=96))


def test_vimeo_triplet_layout(tmp_path):
    from PIL import Image

    root = tmp_path / "vimeo"
    clip = root / "sequences" / "00001" / "0001"
    clip.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in (1, 2, 3):
        arr = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
        Image.fromarray(arr).save(clip / f"im{i}.png")
    partial = root / "sequences" / "00001" / "0002"
    partial.mkdir()
    Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(partial / "im1.png")

    pairs = load_vimeo_triplets(str(root))
    assert len(pairs) == 2
    assert pairs[0][0].endswith("im1.png") and pairs[0][1].endswith("im2.png")
    assert pairs[1][0].endswith("im2.png") and pairs[1][1].endswith("im3.png")
    loaded = load_dataset(
        TrainConfig(stage="me", data=str(root), pairs=8, crop=32, frame_size=96)
    )
    assert len(loaded) == 2 and loaded[0].ref.height == 16
    with pytest.raises(ConfigError):
        load_vimeo_triplets(str(tmp_path / "not-vimeo"))


# --- stage mechanics ---


def _tiny_cfg(stage, **extra):
    base = dict(
        stage=stage, batch_size=2, crop=32, seed=0, max_steps=3, lr=1e-4,
        pairs=2, frame_size=64,
    )
    base.update(extra)
    return TrainConfig(**base)


def test_s2_freezes_compressors_bit_exactly(tmp_path):
    corpus = make_corpus("translate", 2, size=64, seed=1)
    models = build_models(CodecConfig(), seed=0)
    run_stage(models, corpus, _tiny_cfg("me"))
    run_stage(models, corpus, _tiny_cfg("s1"))
    frozen_before = {
        group: {k: v.clone() for k, v in models.modules()[group].state_dict().items()}
        for group in ("motion", "mv_comp", "res_comp")
    }
    refiner_before = {
        k: v.clone() for k, v in models.frame_refiner.state_dict().items()
    }
    run_stage(models, corpus, _tiny_cfg("s2", lr=1e-3))
    for group, states in frozen_before.items():
        after = models.modules()[group].state_dict()
        for key, tensor in states.items():
            assert torch.equal(tensor, after[key]), f"{group}/{key} changed"
    assert any(
        not torch.equal(v, models.frame_refiner.state_dict()[k])
        for k, v in refiner_before.items()
    )


def test_train_stage_chain_and_prerequisites(tmp_path):
    corpus = make_corpus("translate", 2, size=64, seed=1)
    me_path = str(tmp_path / "me.npz")
    with pytest.raises(ConfigError, match="requires"):
        train_stage("s1", corpus, None, _tiny_cfg("s1"), str(tmp_path / "x.npz"))
    train_stage("me", corpus, None, _tiny_cfg("me"), me_path)
    from devc.pipeline import load_checkpoint

    _, meta = load_checkpoint(me_path)
    assert meta["stage"] == "me" and meta["steps"] == 3
    with pytest.raises(ConfigError, match="requires"):
        train_stage("s2", corpus, me_path, _tiny_cfg("s2"), str(tmp_path / "x.npz"))
    with pytest.raises(ConfigError, match="unknown stage"):
        train_stage("s9", corpus, me_path, _tiny_cfg("me"), str(tmp_path / "x.npz"))
    s1_path = str(tmp_path / "s1.npz")
    train_stage("s1", corpus, me_path, _tiny_cfg("s1"), s1_path)
    _, meta = load_checkpoint(s1_path)
    assert meta["stage"] == "s1" and meta["lambda"] == 1024.0


def test_stage_logs_have_finite_loss_rows(tmp_path):
    corpus = make_corpus("translate", 2, size=64, seed=1)
    models = build_models(CodecConfig(), seed=0)
    log = str(tmp_path / "me.csv")
    run_stage(models, corpus, _tiny_cfg("me"), log)
    with open(log, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["step", "loss", "D", "R", "lambda"]
    assert len(rows) == 1 + 3
    for row in rows[1:]:
        assert all(math.isfinite(float(v)) for v in row)


def test_smoke_logs_are_finite_everywhere(smoke):
    for stage, path in smoke["logs"].items():
        with open(path, newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        assert rows, f"no rows logged for {stage}"
        for row in rows:
            for column in ("loss", "D", "R"):
                assert math.isfinite(float(row[column])), (stage, row)
