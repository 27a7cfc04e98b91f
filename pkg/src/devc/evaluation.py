"""Corpus evaluation: per-frame scores, size-weighted aggregates, reports.

Every pair in a manifest is encoded and decoded; the emitted container is
written to disk so the reported byte total is exactly what a submission
would upload.  Aggregate quality is the pixel-count-weighted mean of the
per-frame scores, and a byte budget flag flips the moment the total
exceeds the budget.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .container import MODE_BYPASS
from .errors import ConfigError, DevcError, GeometryError
from .frames import parse_manifest, iter_manifest_pairs
from .metrics import aggregate_weighted as _weighted_mean
from .metrics import ms_ssim_plane, psnr_plane
from .pipeline import CodecModels, encode_pframe

METRIC_PLANE_CHOICES = ("yuv", "y")


@dataclass(frozen=True)
class FrameScore:
    """One evaluated pair; size is the luma pixel count used as Eq-weight."""

    identifier: str
    size: int
    msssim: float
    psnr_db: float
    bits: int
    mode: str
    mv_bits: int

    def __post_init__(self):
        if self.size <= 0:
            raise GeometryError(f"frame {self.identifier!r} has size {self.size}")
        if not (0.0 <= self.msssim <= 1.0):
            raise ConfigError(
                f"frame {self.identifier!r} ms-ssim {self.msssim} outside [0,1]"
            )
        if self.bits < 0 or self.mv_bits < 0:
            raise ConfigError(f"frame {self.identifier!r} has negative bit counts")

    @property
    def bpp(self) -> float:
        return self.bits / self.size


@dataclass
class CorpusReport:
    scores: List[FrameScore]
    weighted_msssim: float
    weighted_psnr: float
    total_bytes: int
    budget_bytes: int
    budget_ok: bool
    mv_bit_share: float
    bypass_fraction: float
    metric_planes: str
    failures: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        data = asdict(self)
        for row, score in zip(data["scores"], self.scores):
            row["bpp"] = score.bpp
        return data


def aggregate_weighted(scores: Sequence[FrameScore], metric: str) -> float:
    """Size-weighted corpus score: sum(score_i * size_i) / sum(size_i)."""
    if not scores:
        raise ConfigError("cannot aggregate an empty score list")
    if metric not in ("msssim", "psnr"):
        raise ConfigError(f"unknown metric {metric!r}")
    values = [s.msssim if metric == "msssim" else s.psnr_db for s in scores]
    sizes = [float(s.size) for s in scores]
    return _weighted_mean(values, sizes)


def _score_pair(models, entry, pair, metric_planes: str) -> tuple:
    result = encode_pframe(models, pair)
    stats = result.stats
    if metric_planes == "y":
        msssim = ms_ssim_plane(pair.target.y, result.reconstruction.y)
        psnr = psnr_plane(pair.target.y, result.reconstruction.y)
    else:
        msssim, psnr = stats.msssim, stats.psnr_db
    score = FrameScore(
        identifier=entry.identifier,
        size=pair.ref.width * pair.ref.height,
        msssim=float(msssim),
        psnr_db=float(psnr),
        bits=stats.total_bits,
        mode=stats.mode,
        mv_bits=stats.mv_bits,
    )
    return score, result.bitstream


def _write_rd_plot(scores: Sequence[FrameScore], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, marker in ((MODE_BYPASS, "x"), ("mc", "o")):
        xs = [s.bpp for s in scores if s.mode == mode]
        ys = [s.msssim for s in scores if s.mode == mode]
        if xs:
            ax.scatter(xs, ys, marker=marker, label=mode)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("MS-SSIM")
    ax.grid(True, alpha=0.3)
    if scores:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def evaluate_corpus(
    manifest_path: str,
    models: CodecModels,
    budget_bytes: int,
    out_dir: str,
    fmt: str = "image-pair",
    width: Optional[int] = None,
    height: Optional[int] = None,
    metric_planes: str = "yuv",
) -> CorpusReport:
    """Encode and decode every manifest pair, score it, and emit artifacts.

    Writes per-frame containers under out_dir/bitstreams, the per-frame CSV,
    an RD scatter plot, and report.json.  Frame failures are recorded and do
    not abort the rest of the corpus.
    """
    if metric_planes not in METRIC_PLANE_CHOICES:
        raise ConfigError(f"metric_planes must be one of {METRIC_PLANE_CHOICES}")
    if budget_bytes <= 0:
        raise ConfigError(f"budget must be positive, got {budget_bytes}")
    entries = parse_manifest(manifest_path)
    os.makedirs(out_dir, exist_ok=True)
    stream_dir = os.path.join(out_dir, "bitstreams")
    os.makedirs(stream_dir, exist_ok=True)

    scores: List[FrameScore] = []
    failures: List[dict] = []
    total_bytes = 0
    for entry in entries:
        try:
            _, pair = next(iter(iter_manifest_pairs([entry], fmt, width, height)))
            score, blob = _score_pair(models, entry, pair, metric_planes)
        except DevcError as exc:
            failures.append(
                {"identifier": entry.identifier, "code": exc.code, "message": exc.message}
            )
            continue
        stream_path = os.path.join(stream_dir, f"{entry.identifier}.devc")
        with open(stream_path, "wb") as handle:
            handle.write(blob)
        total_bytes += os.path.getsize(stream_path)
        scores.append(score)

    total_bits = sum(s.bits for s in scores)
    report = CorpusReport(
        scores=scores,
        weighted_msssim=aggregate_weighted(scores, "msssim") if scores else 0.0,
        weighted_psnr=aggregate_weighted(scores, "psnr") if scores else 0.0,
        total_bytes=total_bytes,
        budget_bytes=budget_bytes,
        budget_ok=total_bytes <= budget_bytes,
        mv_bit_share=(sum(s.mv_bits for s in scores) / total_bits) if total_bits else 0.0,
        bypass_fraction=(
            sum(1 for s in scores if s.mode == MODE_BYPASS) / len(scores) if scores else 0.0
        ),
        metric_planes=metric_planes,
        failures=failures,
    )

    with open(os.path.join(out_dir, "frames.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["identifier", "size", "bits", "bpp", "msssim", "psnr", "mode", "mv_bits"]
        )
        for s in scores:
            writer.writerow(
                [s.identifier, s.size, s.bits, f"{s.bpp:.6f}",
                 f"{s.msssim:.8f}", f"{s.psnr_db:.4f}", s.mode, s.mv_bits]
            )
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    _write_rd_plot(scores, os.path.join(out_dir, "rd_plot.png"))
    return report
