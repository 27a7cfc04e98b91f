"""Shared fixtures: the smoke-training chain and the lambda comparison runs.

Both are session-scoped because they dominate suite runtime; individual tests
read their artifacts (checkpoints, CSV logs, metric dictionaries) instead of
retraining.
"""

import csv
import time

import pytest
import torch

torch.set_num_threads(1)

from devc.pipeline import CodecConfig, build_models, load_checkpoint, save_checkpoint
from devc.training import TrainConfig, make_corpus, measure_pairs, run_stage, train_stage

SMOKE_PAIRS = 8
SMOKE_FRAME = 160
SMOKE_CROP = 128


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("artifacts")


@pytest.fixture(scope="session")
def smoke_corpus():
    return make_corpus("mixed", SMOKE_PAIRS, size=SMOKE_FRAME, seed=3)


@pytest.fixture(scope="session")
def smoke(workdir, smoke_corpus):
    """Train the full stage chain on the mixed synthetic corpus.

    Returns checkpoint paths, per-stage CSV logs, coding-path measurements
    after each stage, and the total wall time.
    """
    t0 = time.time()
    ckpt = {s: str(workdir / f"{s}.npz") for s in ("me", "s1", "s2", "s3")}
    logs = {s: str(workdir / f"{s}.csv") for s in ("me", "s1", "s2", "s3")}

    def cfg(stage, steps, batch, lr, **extra):
        return TrainConfig(
            stage=stage,
            batch_size=batch,
            crop=SMOKE_CROP,
            seed=0,
            max_steps=steps,
            lr=lr,
            pairs=SMOKE_PAIRS,
            frame_size=SMOKE_FRAME,
            **extra,
        )

    train_stage("me", smoke_corpus, None, cfg("me", 120, 4, 5e-4), ckpt["me"], logs["me"])
    train_stage(
        "s1", smoke_corpus, ckpt["me"], cfg("s1", 300, 4, 1e-3, lam=1024.0), ckpt["s1"], logs["s1"]
    )
    measures = {"s1": measure_pairs(load_checkpoint(ckpt["s1"])[0], smoke_corpus)}
    train_stage("s2", smoke_corpus, ckpt["s1"], cfg("s2", 120, 2, 1e-3), ckpt["s2"], logs["s2"])
    measures["s2"] = measure_pairs(load_checkpoint(ckpt["s2"])[0], smoke_corpus)
    train_stage(
        "s3", smoke_corpus, ckpt["s2"], cfg("s3", 80, 2, 1e-4, lam=128.0), ckpt["s3"], logs["s3"]
    )
    measures["s3"] = measure_pairs(load_checkpoint(ckpt["s3"])[0], smoke_corpus)

    return {
        "checkpoints": ckpt,
        "logs": logs,
        "measures": measures,
        "wall_seconds": time.time() - t0,
    }


@pytest.fixture(scope="session")
def trained_models(smoke):
    models, meta = load_checkpoint(smoke["checkpoints"]["s3"])
    assert meta["stage"] == "s3"
    models.eval_mode()
    return models


def _tail_mean(path, column, n=50):
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    vals = [float(row[column]) for row in rows[-n:]]
    return sum(vals) / len(vals)


@pytest.fixture(scope="session")
def lambda_runs(workdir):
    """Short S1 runs at lambda 1024 vs 64 from a shared motion start, 3 seeds.

    Returns {seed: {lam: {"d": ..., "r": ...}}} where d and r are the
    objective's own distortion and bits-per-pixel terms on the training
    pairs, averaged over the final 50 logged steps.
    """
    corpus = make_corpus("mixed", 4, size=SMOKE_FRAME, seed=7)
    out = {}
    for seed in (0, 1, 2):
        me_cfg = TrainConfig(
            stage="me", batch_size=2, crop=96, seed=seed, max_steps=60, lr=5e-4,
            pairs=4, frame_size=SMOKE_FRAME,
        )
        me_path = str(workdir / f"lambda_me_{seed}.npz")
        models = build_models(CodecConfig(), seed=seed)
        run_stage(models, corpus, me_cfg)
        save_checkpoint(me_path, models, {"stage": "me"})
        out[seed] = {}
        for lam in (1024.0, 64.0):
            branch, _ = load_checkpoint(me_path)
            s1_cfg = TrainConfig(
                stage="s1", lam=lam, batch_size=2, crop=96, seed=seed,
                max_steps=250, lr=1e-3, pairs=4, frame_size=SMOKE_FRAME,
            )
            log_path = str(workdir / f"lambda_{seed}_{int(lam)}.csv")
            run_stage(branch, corpus, s1_cfg, log_path)
            out[seed][lam] = {
                "d": _tail_mean(log_path, "D"),
                "r": _tail_mean(log_path, "R"),
            }
    return out


@pytest.fixture(scope="session")
def fresh_models():
    """Untrained deterministic model bundle for structural tests."""
    return build_models(CodecConfig(), seed=0)
