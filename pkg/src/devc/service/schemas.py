"""Request/response bodies for the codec service.

The service operates on files the caller and server both see (a desk tool,
not a transfer protocol), so requests carry paths rather than payloads.
"""

from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, Field

FrameFormat = Literal["image-pair", "raw-yuv420"]


class EncodeRequest(BaseModel):
    ref_path: str
    target_path: str
    model_path: str
    out_path: str
    fmt: FrameFormat = "image-pair"
    width: Optional[int] = Field(default=None, ge=16)
    height: Optional[int] = Field(default=None, ge=16)
    force_mode: Optional[Literal["mc", "bypass"]] = None


class EncodeResponse(BaseModel):
    out_path: str
    bytes_written: int
    mode: str
    total_bits: int
    mv_bits: int
    residual_bits: int
    estimated_bits: float
    bpp: float
    msssim: float
    psnr_db: float
    flow_clamped: int


class DecodeRequest(BaseModel):
    ref_path: str
    bitstream_path: str
    model_path: str
    out_path: str
    fmt: FrameFormat = "image-pair"
    width: Optional[int] = Field(default=None, ge=16)
    height: Optional[int] = Field(default=None, ge=16)


class DecodeResponse(BaseModel):
    out_path: str
    mode: str
    width: int
    height: int


class TrainRequest(BaseModel):
    stage: Literal["me", "s1", "s2", "s3"]
    config_path: str
    checkpoint_out: str
    checkpoint_in: Optional[str] = None
    log_path: Optional[str] = None


class TrainResponse(BaseModel):
    checkpoint_out: str
    stage: str
    steps: int


class EvalRequest(BaseModel):
    manifest_path: str
    model_path: str
    out_dir: str
    budget_bytes: int = Field(default=3_900_000_000, gt=0)
    fmt: FrameFormat = "image-pair"
    width: Optional[int] = Field(default=None, ge=16)
    height: Optional[int] = Field(default=None, ge=16)
    metric_planes: Literal["yuv", "y"] = "yuv"


class FrameRow(BaseModel):
    identifier: str
    size: int
    bits: int
    bpp: float
    msssim: float
    psnr_db: float
    mode: str
    mv_bits: int


class EvalResponse(BaseModel):
    out_dir: str
    report_path: str
    frames: int
    failures: int
    weighted_msssim: float
    weighted_psnr: float
    total_bytes: int
    budget_bytes: int
    budget_ok: bool
    mv_bit_share: float
    bypass_fraction: float
    rows: List[FrameRow]


class ErrorBody(BaseModel):
    code: str
    message: str
