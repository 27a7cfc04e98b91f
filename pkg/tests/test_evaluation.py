"""Corpus evaluation: weighted aggregation, reports, artifacts, budgets."""

import csv
import json
import os

import numpy as np
import pytest

from devc.errors import ConfigError, GeometryError
from devc.evaluation import CorpusReport, FrameScore, aggregate_weighted, evaluate_corpus
from devc.frames import save_yuv420
from devc.training import make_corpus


def _score(identifier="f", size=100, msssim=0.9, psnr=30.0, bits=800, mode="mc", mv=100):
    return FrameScore(
        identifier=identifier, size=size, msssim=msssim, psnr_db=psnr,
        bits=bits, mode=mode, mv_bits=mv,
    )


def test_frame_score_validation():
    score = _score(size=200, bits=900)
    assert score.bpp == pytest.approx(4.5)
    with pytest.raises(GeometryError):
        _score(size=0)
    with pytest.raises(ConfigError):
        _score(msssim=1.2)
    with pytest.raises(ConfigError):
        _score(bits=-1)
    with pytest.raises(ConfigError):
        _score(mv=-1)


def test_aggregate_weighted_examples():
    pair = [_score("a", size=100, msssim=0.9), _score("b", size=300, msssim=1.0)]
    assert aggregate_weighted(pair, "msssim") == 0.975
    equal = [_score("a", size=64, msssim=0.5), _score("b", size=64, msssim=0.7)]
    assert aggregate_weighted(equal, "msssim") == pytest.approx(0.6, abs=1e-15)
    assert aggregate_weighted([_score("a", psnr=32.0)], "psnr") == 32.0
    with pytest.raises(ConfigError):
        aggregate_weighted([], "msssim")
    with pytest.raises(ConfigError):
        aggregate_weighted(pair, "vmaf")


def test_aggregate_order_invariance_and_linearity():
    rng = np.random.default_rng(3)
    scores = [
        _score(f"s{i}", size=int(rng.integers(10, 5000)), msssim=float(rng.uniform(0, 1)))
        for i in range(16)
    ]
    forward = aggregate_weighted(scores, "msssim")
    assert abs(aggregate_weighted(scores[::-1], "msssim") - forward) < 1e-12
    halved = [
        _score(s.identifier, size=s.size, msssim=s.msssim / 2) for s in scores
    ]
    assert abs(aggregate_weighted(halved, "msssim") - forward / 2) < 1e-12


def _write_png_pairs(tmp_path, dims):
    from PIL import Image

    rng = np.random.default_rng(7)
    lines = []
    for i, (w, h) in enumerate(dims):
        ref = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
        tgt = np.roll(ref, 2, axis=1)
        ref_path, tgt_path = tmp_path / f"r{i}.png", tmp_path / f"t{i}.png"
        Image.fromarray(ref).save(ref_path)
        Image.fromarray(tgt).save(tgt_path)
        lines.append(f"pair{i}\t{ref_path.name}\t{tgt_path.name}")
    manifest = tmp_path / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return str(manifest)


def test_evaluate_corpus_matches_hand_aggregation(fresh_models, tmp_path):
    manifest = _write_png_pairs(tmp_path, [(48, 32), (32, 32)])
    out = tmp_path / "out"
    report = evaluate_corpus(manifest, fresh_models, 10**9, str(out))
    assert [s.identifier for s in report.scores] == ["pair0", "pair1"]
    assert [s.size for s in report.scores] == [48 * 32, 32 * 32]

    wsum = sum(s.msssim * s.size for s in report.scores)
    total = sum(s.size for s in report.scores)
    assert abs(report.weighted_msssim - wsum / total) < 1e-12
    psum = sum(s.psnr_db * s.size for s in report.scores)
    assert abs(report.weighted_psnr - psum / total) < 1e-12
    lo = min(s.msssim for s in report.scores)
    hi = max(s.msssim for s in report.scores)
    assert lo <= report.weighted_msssim <= hi

    # report bytes equal the artifacts actually on disk, bit for bit
    stream_dir = out / "bitstreams"
    sizes = {p.name: p.stat().st_size for p in stream_dir.iterdir()}
    assert sorted(sizes) == ["pair0.devc", "pair1.devc"]
    assert report.total_bytes == sum(sizes.values())
    assert report.total_bytes * 8 == sum(s.bits for s in report.scores)
    assert report.budget_ok

    with open(out / "frames.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["identifier", "size", "bits", "bpp", "msssim", "psnr", "mode", "mv_bits"]
    assert len(rows) == 3
    with open(out / "report.json", encoding="utf-8") as fh:
        blob = json.load(fh)
    assert blob["weighted_msssim"] == pytest.approx(report.weighted_msssim)
    assert blob["total_bytes"] == report.total_bytes
    assert (out / "rd_plot.png").stat().st_size > 0


def test_evaluate_corpus_budget_flag(fresh_models, tmp_path):
    manifest = _write_png_pairs(tmp_path, [(32, 32)])
    report = evaluate_corpus(
        manifest, fresh_models, 10**9, str(tmp_path / "o1"), metric_planes="y"
    )
    assert report.metric_planes == "y"
    assert 0.0 <= report.weighted_msssim <= 1.0
    # no real encoding fits in 100 bytes
    tight = evaluate_corpus(manifest, fresh_models, 100, str(tmp_path / "o2"))
    assert tight.total_bytes == report.total_bytes
    assert not tight.budget_ok
    with pytest.raises(ConfigError):
        evaluate_corpus(manifest, fresh_models, 0, str(tmp_path / "o3"))
    with pytest.raises(ConfigError):
        evaluate_corpus(manifest, fresh_models, 100, str(tmp_path / "o4"),
                        metric_planes="rgb")


def test_evaluate_corpus_records_frame_failures(fresh_models, tmp_path):
    manifest = _write_png_pairs(tmp_path, [(32, 32)])
    with open(manifest, "a", encoding="utf-8") as fh:
        fh.write(f"broken\t{tmp_path / 'r0.png'}\t{tmp_path / 'missing.png'}\n")
    report = evaluate_corpus(manifest, fresh_models, 10**9, str(tmp_path / "out"))
    assert [s.identifier for s in report.scores] == ["pair0"]
    assert len(report.failures) == 1
    failure = report.failures[0]
    assert failure["identifier"] == "broken"
    assert failure["code"] and failure["message"]


def test_bypass_only_corpus_has_zero_mv_share(trained_models, tmp_path):
    pairs = make_corpus("cut", 2, size=160, seed=5)
    lines = []
    for i, pair in enumerate(pairs):
        rp, tp = tmp_path / f"r{i}.yuv", tmp_path / f"t{i}.yuv"
        save_yuv420(str(rp), pair.ref)
        save_yuv420(str(tp), pair.target)
        lines.append(f"cut{i}\t{rp.name}\t{tp.name}")
    manifest = tmp_path / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    report = evaluate_corpus(
        str(manifest), trained_models, 10**9, str(tmp_path / "out"),
        fmt="raw-yuv420", width=160, height=160,
    )
    assert report.bypass_fraction == 1.0
    assert report.mv_bit_share == 0.0
    assert all(s.mode == "bypass" for s in report.scores)
