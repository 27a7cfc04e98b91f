"""Staged codec training.

Four stages chained through checkpoints: "me" pretrains the motion
estimator on warped-error loss, "s1" trains both compressors on
rate + MSE with the motion net frozen, "s2" freezes the compressors
bit-exactly and trains the refinement nets on reconstruction MSE, and
"s3" fine-tunes everything jointly on rate + (1 - MS-SSIM) under a
lambda schedule.  Each stage appends step,loss,D,R,lambda rows to a CSV
log and saves a checkpoint tagged with its stage name so prerequisites
can be enforced.

Desk-scale data is synthetic: global-translation pairs (motion
compensation should win), scene-cut pairs built as shapes teleporting
over a static textured background (any nonzero flow drags the
background, so bypass should win), and static pairs.  A Vimeo-style
triplet directory is also accepted.
"""

from __future__ import annotations

import copy
import csv
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, GeometryError, NumericError
from .frames import FramePair, YUVFrame, load_frame_pair, normalize_plane
from .metrics import ms_ssim_torch
from .motion import me_loss, warp
from .pipeline import (
    CodecConfig,
    CodecModels,
    build_models,
    encode_pframe,
    load_checkpoint,
    save_checkpoint,
)

STAGES = ("me", "s1", "s2", "s3")
_PREREQUISITE = {"me": None, "s1": "me", "s2": "s1", "s3": "s2"}
DEFAULT_LAMBDA = {"me": 1.0, "s1": 1024.0, "s2": 1.0, "s3": 128.0}
MV_LAMBDA = 128.0


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "s1"
    lam: Optional[float] = None
    lambda_schedule: Tuple[Tuple[int, float], ...] = ()
    batch_size: int = 8
    crop: int = 256
    seed: int = 0
    max_steps: int = 200
    lr: float = 1e-4
    data: str = "synthetic:mixed"
    pairs: int = 8
    frame_size: int = 256
    eval_every: int = 0
    plateau_window: int = 200
    plateau_tol: float = 0.01

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.lam is not None and not (math.isfinite(self.lam) and self.lam > 0):
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        last = -1
        for step, value in self.lambda_schedule:
            if step <= last:
                raise ConfigError("lambda_schedule steps must be strictly increasing")
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"lambda_schedule value {value} must be positive")
            last = step
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.crop < 32 or self.crop % 16:
            raise ConfigError(f"crop must be a multiple of 16 and >= 32, got {self.crop}")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.pairs < 1:
            raise ConfigError("pairs must be at least 1")
        if self.frame_size < self.crop:
            raise ConfigError(
                f"frame_size {self.frame_size} is smaller than crop {self.crop}"
            )

    def resolved_lambda(self) -> float:
        return DEFAULT_LAMBDA[self.stage] if self.lam is None else self.lam

    def schedule(self) -> Tuple[Tuple[int, float], ...]:
        if self.lambda_schedule:
            return self.lambda_schedule
        lam = self.resolved_lambda()
        if self.stage == "s3":
            return ((0, 4.0 * lam), (max(1, self.max_steps // 2), lam))
        return ((0, lam),)


def lambda_at(schedule: Sequence[Tuple[int, float]], step: int) -> float:
    value = schedule[0][1]
    for start, lam in schedule:
        if step >= start:
            value = lam
    return value


_CONFIG_KEYS = {
    "stage": str,
    "lambda": float,
    "lambda_schedule": str,
    "batch_size": int,
    "crop": int,
    "seed": int,
    "max_steps": int,
    "lr": float,
    "data": str,
    "pairs": int,
    "frame_size": int,
    "eval_every": int,
    "plateau_window": int,
    "plateau_tol": float,
}


def _parse_schedule(text: str) -> Tuple[Tuple[int, float], ...]:
    items = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        step_s, _, lam_s = chunk.partition(":")
        try:
            items.append((int(step_s), float(lam_s)))
        except ValueError as exc:
            raise ConfigError(f"bad lambda_schedule entry {chunk!r}") from exc
    return tuple(items)


def parse_train_config(path: str, stage: str | None = None) -> TrainConfig:
    """Read a key=value config file; later lines override earlier ones."""
    values: Dict[str, object] = {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        caster = _CONFIG_KEYS[key]
        try:
            values[key] = _parse_schedule(value) if key == "lambda_schedule" else caster(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    if stage is not None:
        values["stage"] = stage
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    return TrainConfig(**values)


def rd_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    rate_bits: torch.Tensor,
    lam: float,
    distortion_kind: str = "mse",
) -> torch.Tensor:
    """lambda * D + R with R in bits per pixel of x."""
    if distortion_kind not in ("mse", "msssim"):
        raise ConfigError(f"unknown distortion kind {distortion_kind!r}")
    if x.shape != x_hat.shape:
        raise GeometryError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if not (math.isfinite(lam) and lam >= 0):
        raise ConfigError(f"lambda must be finite and non-negative, got {lam}")
    rate_value = float(rate_bits.detach() if torch.is_tensor(rate_bits) else rate_bits)
    if not math.isfinite(rate_value) or rate_value < 0:
        raise NumericError(f"rate must be finite and non-negative, got {rate_value}")
    if distortion_kind == "mse":
        distortion = F.mse_loss(x_hat, x)
    else:
        distortion = 1.0 - ms_ssim_torch(x_hat, x).mean()
    pixels = x.shape[0] * x.shape[2] * x.shape[3]
    if not torch.is_tensor(rate_bits):
        rate_bits = torch.as_tensor(rate_bits, dtype=distortion.dtype)
    return lam * distortion + rate_bits / pixels


# ---------------------------------------------------------------------------
# Synthetic corpora.


def _smooth_field(rng: np.random.Generator, h: int, w: int, passes: int) -> np.ndarray:
    field = rng.standard_normal((h, w))
    for _ in range(passes):
        field = (
            field
            + np.roll(field, 1, axis=0)
            + np.roll(field, -1, axis=0)
            + np.roll(field, 1, axis=1)
            + np.roll(field, -1, axis=1)
        ) / 5.0
    return field


def make_texture(
    rng: np.random.Generator,
    h: int,
    w: int,
    low: float = 30.0,
    high: float = 225.0,
    passes: int = 2,
) -> np.ndarray:
    field = _smooth_field(rng, h, w, passes)
    span = field.max() - field.min()
    if span == 0:
        return np.full((h, w), int((low + high) / 2), dtype=np.uint8)
    unit = (field - field.min()) / span
    return np.round(low + unit * (high - low)).astype(np.uint8)


def _chroma_texture(rng: np.random.Generator, h2: int, w2: int, amp: float = 10.0) -> np.ndarray:
    field = _smooth_field(rng, h2, w2, passes=3)
    scale = amp / max(float(np.abs(field).max()), 1e-9)
    return np.clip(np.round(128 + field * scale), 0, 255).astype(np.uint8)


def _even_shift(rng: np.random.Generator, lo: int, hi: int) -> int:
    choices = [d for d in range(-hi, hi + 1, 2) if abs(d) >= lo or d == 0]
    return int(rng.choice(choices))


def translation_pair(rng: np.random.Generator, size: int = 160) -> FramePair:
    """Global even-integer translation; chroma shifts by exactly half.

    Shifts span 8..24 px so they are visible as whole cells in the coarse
    correlation volumes rather than sub-cell fractions.
    """
    margin = 24
    dx = dy = 0
    while dx == 0 and dy == 0:
        dx, dy = _even_shift(rng, 8, 24), _even_shift(rng, 8, 24)
    canvas = make_texture(rng, size + 2 * margin, size + 2 * margin, passes=1)
    cu = _chroma_texture(rng, (size + 2 * margin) // 2, (size + 2 * margin) // 2)
    cv = _chroma_texture(rng, (size + 2 * margin) // 2, (size + 2 * margin) // 2)

    def window(plane: np.ndarray, oy: int, ox: int, n: int) -> np.ndarray:
        return plane[oy : oy + n, ox : ox + n].copy()

    half, hm = size // 2, margin // 2
    ref = YUVFrame(
        y=window(canvas, margin, margin, size),
        u=window(cu, hm, hm, half),
        v=window(cv, hm, hm, half),
    )
    target = YUVFrame(
        y=window(canvas, margin + dy, margin + dx, size),
        u=window(cu, hm + dy // 2, hm + dx // 2, half),
        v=window(cv, hm + dy // 2, hm + dx // 2, half),
    )
    return FramePair(ref=ref, target=target, identifier=f"translate{dx:+d}{dy:+d}")


def cut_pair(rng: np.random.Generator, size: int = 160) -> FramePair:
    """Scene cut: shapes vanish and unrelated ones appear over a static
    background.

    Disappearing shapes uncover texture the reference never shows and the
    appearing shapes carry fresh texture unrelated to anything in the
    reference, so no flow field can beat the plain frame difference there.
    Meanwhile any nonzero flow drags the static fine-grained background and
    inflates the motion-compensated difference, so a codec that hallucinates
    motion on such a pair must fall back to bypass.
    """
    background = make_texture(rng, size, size, low=20.0, high=235.0, passes=1)

    def paste_shapes(canvas: np.ndarray) -> None:
        for _ in range(8):
            side = int(rng.integers(10, 21))
            oy = int(rng.integers(0, size - side))
            ox = int(rng.integers(0, size - side))
            patch = make_texture(rng, side, side, low=0.0, high=255.0, passes=1)
            canvas[oy : oy + side, ox : ox + side] = patch

    ref_y = background.copy()
    tgt_y = background.copy()
    paste_shapes(ref_y)
    paste_shapes(tgt_y)
    chroma_u = _chroma_texture(rng, size // 2, size // 2, amp=16.0)
    chroma_v = _chroma_texture(rng, size // 2, size // 2, amp=16.0)
    ref = YUVFrame(y=ref_y, u=chroma_u, v=chroma_v)
    target = YUVFrame(y=tgt_y, u=chroma_u.copy(), v=chroma_v.copy())
    return FramePair(ref=ref, target=target, identifier="cut")


def static_pair(rng: np.random.Generator, size: int = 160) -> FramePair:
    tex = make_texture(rng, size, size, passes=2)
    u = _chroma_texture(rng, size // 2, size // 2)
    v = _chroma_texture(rng, size // 2, size // 2)
    ref = YUVFrame(y=tex, u=u, v=v)
    target = YUVFrame(y=tex.copy(), u=u.copy(), v=v.copy())
    return FramePair(ref=ref, target=target, identifier="static")


def make_corpus(kind: str, count: int, size: int = 160, seed: int = 0) -> List[FramePair]:
    rng = np.random.default_rng(seed)
    out: List[FramePair] = []
    for i in range(count):
        if kind == "translate":
            out.append(translation_pair(rng, size))
        elif kind == "cut":
            out.append(cut_pair(rng, size))
        elif kind == "static":
            out.append(static_pair(rng, size))
        elif kind == "mixed":
            out.append(cut_pair(rng, size) if i % 4 == 3 else translation_pair(rng, size))
        else:
            raise ConfigError(f"unknown synthetic corpus kind {kind!r}")
    return out


def load_vimeo_triplets(root: str) -> List[Tuple[str, str]]:
    """Pairs (im1,im2) and (im2,im3) from a sequences/*/*/imN.png layout."""
    seq_root = os.path.join(root, "sequences")
    if not os.path.isdir(seq_root):
        raise ConfigError(f"{root!r} has no sequences/ directory")
    pairs: List[Tuple[str, str]] = []
    for group in sorted(os.listdir(seq_root)):
        group_dir = os.path.join(seq_root, group)
        if not os.path.isdir(group_dir):
            continue
        for clip in sorted(os.listdir(group_dir)):
            clip_dir = os.path.join(group_dir, clip)
            frames = [os.path.join(clip_dir, f"im{i}.png") for i in (1, 2, 3)]
            if all(os.path.isfile(f) for f in frames):
                pairs.append((frames[0], frames[1]))
                pairs.append((frames[1], frames[2]))
    return pairs


def load_dataset(config: TrainConfig) -> List[FramePair]:
    data = config.data
    if data.startswith("synthetic:"):
        kind = data.split(":", 1)[1]
        return make_corpus(kind, config.pairs, config.frame_size, config.seed)
    if os.path.isdir(data):
        paths = load_vimeo_triplets(data)[: config.pairs]
        if not paths:
            raise ConfigError(f"no triplets found under {data!r}")
        return [
            load_frame_pair(ref, tgt, "image-pair") for ref, tgt in paths
        ]
    raise ConfigError(f"unknown data source {data!r}")


def make_training_batch(
    dataset: Sequence[FramePair],
    crop: int,
    seed: int,
    batch_size: int = 8,
) -> List[FramePair]:
    """Random crop + horizontal flip, the same transform on both frames."""
    if crop % 2:
        raise ConfigError(f"crop must be even, got {crop}")
    rng = np.random.default_rng(seed)
    eligible = []
    for pair in dataset:
        if pair.ref.height < crop or pair.ref.width < crop:
            warnings.warn(
                f"skipping pair {pair.identifier!r}: "
                f"{pair.ref.width}x{pair.ref.height} smaller than crop {crop}"
            )
            continue
        eligible.append(pair)
    if not eligible:
        raise ConfigError(f"no pair is at least {crop}x{crop}")
    batch: List[FramePair] = []
    for _ in range(batch_size):
        pair = eligible[int(rng.integers(0, len(eligible)))]
        y0 = 2 * int(rng.integers(0, (pair.ref.height - crop) // 2 + 1))
        x0 = 2 * int(rng.integers(0, (pair.ref.width - crop) // 2 + 1))
        flip = bool(rng.random() < 0.5)

        def cut(frame: YUVFrame) -> YUVFrame:
            y = frame.y[y0 : y0 + crop, x0 : x0 + crop]
            u = frame.u[y0 // 2 : (y0 + crop) // 2, x0 // 2 : (x0 + crop) // 2]
            v = frame.v[y0 // 2 : (y0 + crop) // 2, x0 // 2 : (x0 + crop) // 2]
            if flip:
                y, u, v = (np.flip(p, axis=1) for p in (y, u, v))
            return YUVFrame(y=y.copy(), u=u.copy(), v=v.copy())

        suffix = f"@{x0},{y0}" + ("|flip" if flip else "")
        batch.append(
            FramePair(ref=cut(pair.ref), target=cut(pair.target),
                      identifier=pair.identifier + suffix)
        )
    return batch


def _batch_luma(batch: Sequence[FramePair]) -> Tuple[torch.Tensor, torch.Tensor]:
    refs, targets = [], []
    for pair in batch:
        refs.append(normalize_plane(pair.ref.y, "image")[0])
        targets.append(normalize_plane(pair.target.y, "image")[0])
    ref_t = torch.from_numpy(np.stack(refs)).unsqueeze(1)
    tgt_t = torch.from_numpy(np.stack(targets)).unsqueeze(1)
    return ref_t, tgt_t


# ---------------------------------------------------------------------------
# Stage loops.


class _CsvLog:
    def __init__(self, path: Optional[str]):
        self.path = path
        if path and not os.path.exists(path):
            with open(path, "w", newline="", encoding="utf-8") as handle:
                csv.writer(handle).writerow(["step", "loss", "D", "R", "lambda"])

    def row(self, step: int, loss: float, d: float, r: float, lam: float) -> None:
        for name, value in (("loss", loss), ("D", d), ("R", r)):
            if not math.isfinite(value):
                raise NumericError(f"non-finite {name} {value} at step {step}")
        if self.path:
            with open(self.path, "a", newline="", encoding="utf-8") as handle:
                csv.writer(handle).writerow(
                    [step, f"{loss:.6f}", f"{d:.6f}", f"{r:.6f}", f"{lam:g}"]
                )


class _Plateau:
    """Halve the learning rate when the windowed loss stops improving."""

    def __init__(self, optimizer: torch.optim.Optimizer, window: int, tol: float):
        self.optimizer = optimizer
        self.window = window
        self.tol = tol
        self.history: List[float] = []

    def update(self, loss: float) -> None:
        self.history.append(loss)
        if len(self.history) < 2 * self.window:
            return
        before = sum(self.history[: self.window]) / self.window
        after = sum(self.history[self.window :]) / self.window
        if after > before * (1.0 - self.tol):
            for group in self.optimizer.param_groups:
                group["lr"] *= 0.5
        self.history = []


def _set_requires_grad(modules: Sequence[torch.nn.Module], flag: bool) -> None:
    for module in modules:
        for param in module.parameters():
            param.requires_grad_(flag)


def _norm_flow(flow: torch.Tensor, magnitude: float) -> torch.Tensor:
    return ((flow + magnitude) / (2.0 * magnitude)).clamp(0.0, 1.0)


def _flow_units(x_hat: torch.Tensor, magnitude: float) -> torch.Tensor:
    return x_hat * (2.0 * magnitude) - magnitude


def _pick_basis(
    ref_t: torch.Tensor, tgt_t: torch.Tensor, warped: torch.Tensor
) -> torch.Tensor:
    fd = ((tgt_t - ref_t) ** 2).sum(dim=(1, 2, 3))
    mcfd = ((tgt_t - warped) ** 2).sum(dim=(1, 2, 3))
    bypass = (mcfd > fd).detach()
    return torch.where(bypass.view(-1, 1, 1, 1), ref_t, warped)


def _sign_quant_forward(comp, x: torch.Tensor) -> torch.Tensor:
    """Deterministic surrogate of the coding path: hyper rounding plus the
    sign quantizer, with the context conditioned on the clean latents."""
    y, _ = comp.latents(x)
    z = comp.hyper_encoder(y)
    z_int = torch.round(z).clamp(-128, 127)
    grid = (int(y.shape[2]), int(y.shape[3]))
    hyper_feat = comp.hyper_decoder(z_int, grid)
    params = comp.context(y, hyper_feat)
    b = torch.where(y >= params.mu, 1.0, -1.0)
    y_hat = params.mu + params.sigma * b
    return comp.synthesis(y_hat, (int(x.shape[2]), int(x.shape[3])))


def _run_me(models: CodecModels, pairs, cfg: TrainConfig, log: _CsvLog) -> None:
    models.train_mode()
    opt = torch.optim.Adam(models.motion.parameters(), lr=cfg.lr)
    plateau = _Plateau(opt, cfg.plateau_window, cfg.plateau_tol)
    for step in range(cfg.max_steps):
        batch = make_training_batch(pairs, cfg.crop, cfg.seed + step, cfg.batch_size)
        ref_t, tgt_t = _batch_luma(batch)
        pyramid = models.motion(ref_t, tgt_t)
        loss = me_loss(pyramid, ref_t, tgt_t)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(models.motion.parameters(), 1.0)
        opt.step()
        value = float(loss.detach())
        log.row(step, value, value, 0.0, 0.0)
        plateau.update(value)
    models.eval_mode()


def _run_s1(models: CodecModels, pairs, cfg: TrainConfig, log: _CsvLog) -> None:
    models.train_mode()
    magnitude = models.config.flow_magnitude
    lam = cfg.resolved_lambda()
    _set_requires_grad([models.motion, models.mv_refiner, models.frame_refiner], False)
    params = list(models.mv_comp.parameters()) + list(models.res_comp.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    plateau = _Plateau(opt, cfg.plateau_window, cfg.plateau_tol)
    for step in range(cfg.max_steps):
        batch = make_training_batch(pairs, cfg.crop, cfg.seed + step, cfg.batch_size)
        ref_t, tgt_t = _batch_luma(batch)
        with torch.no_grad():
            flow = models.motion(ref_t, tgt_t).finest
            x_mv = _norm_flow(flow, magnitude)
            basis = _pick_basis(ref_t, tgt_t, warp(ref_t, flow))
            x_res = tgt_t - basis
        mv_out = models.mv_comp.train_forward(x_mv)
        res_out = models.res_comp.train_forward(x_res)
        mv_rate = mv_out.rate_main_bits + mv_out.rate_hyper_bits + mv_out.sign_bits
        res_rate = res_out.rate_main_bits + res_out.rate_hyper_bits + res_out.sign_bits
        loss = rd_loss(x_mv, mv_out.x_hat, mv_rate, MV_LAMBDA, "mse") + rd_loss(
            x_res, res_out.x_hat, res_rate, lam, "mse"
        )
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        pixels = ref_t.shape[0] * ref_t.shape[2] * ref_t.shape[3]
        d_value = float(F.mse_loss(res_out.x_hat, x_res).detach())
        r_value = float((mv_rate + res_rate).detach()) / pixels
        log.row(step, float(loss.detach()), d_value, r_value, lam)
        plateau.update(float(loss.detach()))
    _set_requires_grad([models.motion, models.mv_refiner, models.frame_refiner], True)
    models.eval_mode()


def _run_s2(models: CodecModels, pairs, cfg: TrainConfig, log: _CsvLog) -> None:
    models.train_mode()
    magnitude = models.config.flow_magnitude
    frozen = [models.motion, models.mv_comp, models.res_comp]
    _set_requires_grad(frozen, False)
    params = list(models.mv_refiner.parameters()) + list(models.frame_refiner.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    plateau = _Plateau(opt, cfg.plateau_window, cfg.plateau_tol)
    for step in range(cfg.max_steps):
        batch = make_training_batch(pairs, cfg.crop, cfg.seed + step, cfg.batch_size)
        ref_t, tgt_t = _batch_luma(batch)
        with torch.no_grad():
            flow = models.motion(ref_t, tgt_t).finest
            x_mv = _norm_flow(flow, magnitude)
            x_mv_hat = _sign_quant_forward(models.mv_comp, x_mv)
        flow_hat = models.mv_refiner(_flow_units(x_mv_hat, magnitude))
        warped = warp(ref_t, flow_hat)
        basis = _pick_basis(ref_t, tgt_t, warped)
        with torch.no_grad():
            x_res = (tgt_t - basis).detach()
            x_res_hat = _sign_quant_forward(models.res_comp, x_res)
        recon = models.frame_refiner(basis, x_res_hat)
        loss = F.mse_loss(recon, tgt_t)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        value = float(loss.detach())
        log.row(step, value, value, 0.0, cfg.resolved_lambda())
        plateau.update(value)
    _set_requires_grad(frozen, True)
    models.eval_mode()


def _snapshot(models: CodecModels) -> Dict[str, Dict[str, torch.Tensor]]:
    return {
        group: copy.deepcopy(module.state_dict())
        for group, module in models.modules().items()
    }


def _restore(models: CodecModels, snapshot: Dict[str, Dict[str, torch.Tensor]]) -> None:
    for group, module in models.modules().items():
        module.load_state_dict(snapshot[group])


def _run_s3(models: CodecModels, pairs, cfg: TrainConfig, log: _CsvLog) -> None:
    magnitude = models.config.flow_magnitude
    schedule = cfg.schedule()
    params = [p for m in models.modules().values() for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    plateau = _Plateau(opt, cfg.plateau_window, cfg.plateau_tol)
    eval_every = cfg.eval_every or max(1, cfg.max_steps // 3)
    best_score = measure_pairs(models, pairs)["msssim"]
    best_state = _snapshot(models)

    def consider() -> None:
        nonlocal best_score, best_state
        score = measure_pairs(models, pairs)["msssim"]
        if score > best_score:
            best_score = score
            best_state = _snapshot(models)

    models.train_mode()
    for step in range(cfg.max_steps):
        batch = make_training_batch(pairs, cfg.crop, cfg.seed + step, cfg.batch_size)
        ref_t, tgt_t = _batch_luma(batch)
        flow = models.motion(ref_t, tgt_t).finest
        x_mv = _norm_flow(flow, magnitude)
        mv_out = models.mv_comp.train_forward(x_mv)
        flow_hat = models.mv_refiner(_flow_units(mv_out.x_hat, magnitude))
        warped = warp(ref_t, flow_hat)
        basis = _pick_basis(ref_t, tgt_t, warped)
        x_res = tgt_t - basis
        res_out = models.res_comp.train_forward(x_res)
        recon = models.frame_refiner(basis, res_out.x_hat)
        rate = (
            mv_out.rate_main_bits
            + mv_out.rate_hyper_bits
            + mv_out.sign_bits
            + res_out.rate_main_bits
            + res_out.rate_hyper_bits
            + res_out.sign_bits
        )
        lam = lambda_at(schedule, step)
        loss = rd_loss(tgt_t, recon, rate, lam, "msssim") + MV_LAMBDA * F.mse_loss(
            mv_out.x_hat, x_mv
        )
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        pixels = ref_t.shape[0] * ref_t.shape[2] * ref_t.shape[3]
        with torch.no_grad():
            d_value = float(1.0 - ms_ssim_torch(recon, tgt_t).mean())
        log.row(step, float(loss.detach()), d_value, float(rate.detach()) / pixels, lam)
        plateau.update(float(loss.detach()))
        if (step + 1) % eval_every == 0 and step + 1 < cfg.max_steps:
            models.eval_mode()
            consider()
            models.train_mode()
    models.eval_mode()
    consider()
    _restore(models, best_state)


def measure_pairs(models: CodecModels, pairs: Sequence[FramePair]) -> Dict[str, object]:
    """Deterministic coding-path metrics on a pair list (plain averages)."""
    models.eval_mode()
    msssim, psnr, bits, pixels, sse, samples = 0.0, 0.0, 0, 0, 0.0, 0
    modes: List[str] = []
    mv_bits = 0
    for pair in pairs:
        result = encode_pframe(models, pair)
        stats = result.stats
        msssim += stats.msssim
        psnr += stats.psnr_db
        bits += stats.total_bits
        mv_bits += stats.mv_bits
        pixels += pair.ref.width * pair.ref.height
        modes.append(stats.mode)
        for name, plane in pair.target.planes():
            recon = getattr(result.reconstruction, name)
            diff = plane.astype(np.float64) - recon.astype(np.float64)
            sse += float((diff * diff).sum())
            samples += plane.size
    n = len(pairs)
    return {
        "msssim": msssim / n,
        "psnr_db": psnr / n,
        "mse": sse / samples,
        "bpp": bits / pixels,
        "modes": modes,
        "mv_bit_share": mv_bits / bits if bits else 0.0,
    }


_RUNNERS = {"me": _run_me, "s1": _run_s1, "s2": _run_s2, "s3": _run_s3}


def run_stage(
    models: CodecModels,
    pairs: Sequence[FramePair],
    config: TrainConfig,
    log_path: Optional[str] = None,
) -> CodecModels:
    """Run one stage loop in place on an existing model bundle."""
    if config.stage not in _RUNNERS:
        raise ConfigError(f"unknown stage {config.stage!r}")
    torch.manual_seed(config.seed)
    _RUNNERS[config.stage](models, pairs, config, _CsvLog(log_path))
    return models


def train_stage(
    stage: str,
    dataset: Optional[Sequence[FramePair]],
    checkpoint_in: Optional[str],
    config: TrainConfig,
    checkpoint_out: str,
    log_path: Optional[str] = None,
) -> str:
    """File-level stage runner enforcing the stage chain me -> s1 -> s2 -> s3."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if config.stage != stage:
        config = TrainConfig(**{**config.__dict__, "stage": stage})
    required = _PREREQUISITE[stage]
    if checkpoint_in is None:
        if required is not None:
            raise ConfigError(f"stage {stage!r} requires a {required!r} checkpoint")
        models = build_models(CodecConfig(), seed=config.seed)
    else:
        models, meta = load_checkpoint(checkpoint_in)
        if required is not None and meta.get("stage") != required:
            raise ConfigError(
                f"stage {stage!r} requires a {required!r} checkpoint, "
                f"got {meta.get('stage')!r}"
            )
    pairs = load_dataset(config) if dataset is None else dataset
    run_stage(models, pairs, config, log_path)
    save_checkpoint(
        checkpoint_out,
        models,
        {"stage": stage, "steps": config.max_steps, "lambda": config.resolved_lambda()},
    )
    return checkpoint_out
