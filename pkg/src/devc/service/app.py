"""FastAPI wrapper around the codec.

Endpoints are plain sync functions (FastAPI runs them in its threadpool);
the model cache avoids reloading a checkpoint for every request and
invalidates on file modification time.
"""

from __future__ import annotations

import os
import threading
from typing import Dict, Tuple

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..errors import DevcError
from ..evaluation import evaluate_corpus
from ..frames import load_frame_pair, load_frame, save_yuv420
from ..pipeline import CodecModels, decode_pframe, encode_pframe, load_checkpoint
from ..training import parse_train_config, train_stage
from .schemas import (
    DecodeRequest,
    DecodeResponse,
    EncodeRequest,
    EncodeResponse,
    ErrorBody,
    EvalRequest,
    EvalResponse,
    FrameRow,
    TrainRequest,
    TrainResponse,
)


class ModelCache:
    """Checkpoint path -> loaded models, invalidated by mtime."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: Dict[str, Tuple[float, CodecModels]] = {}

    def get(self, path: str) -> CodecModels:
        key = os.path.abspath(path)
        mtime = os.path.getmtime(key) if os.path.exists(key) else -1.0
        with self._lock:
            cached = self._entries.get(key)
            if cached is not None and cached[0] == mtime:
                return cached[1]
        models, _ = load_checkpoint(key)
        with self._lock:
            self._entries[key] = (mtime, models)
        return models


def create_app() -> FastAPI:
    app = FastAPI(title="devc", version="0.1.0")
    cache = ModelCache()

    @app.exception_handler(DevcError)
    def _devc_error(request: Request, exc: DevcError) -> JSONResponse:
        body = ErrorBody(code=exc.code, message=exc.message)
        return JSONResponse(status_code=400, content=body.model_dump())

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/encode", response_model=EncodeResponse)
    def encode(req: EncodeRequest) -> EncodeResponse:
        models = cache.get(req.model_path)
        pair = load_frame_pair(req.ref_path, req.target_path, req.fmt, req.width, req.height)
        result = encode_pframe(models, pair, force_mode=req.force_mode)
        with open(req.out_path, "wb") as handle:
            handle.write(result.bitstream)
        stats = result.stats
        return EncodeResponse(
            out_path=req.out_path,
            bytes_written=len(result.bitstream),
            mode=stats.mode,
            total_bits=stats.total_bits,
            mv_bits=stats.mv_bits,
            residual_bits=stats.residual_bits,
            estimated_bits=stats.estimated_bits,
            bpp=stats.bpp,
            msssim=stats.msssim,
            psnr_db=stats.psnr_db,
            flow_clamped=stats.flow_clamped,
        )

    @app.post("/decode", response_model=DecodeResponse)
    def decode(req: DecodeRequest) -> DecodeResponse:
        models = cache.get(req.model_path)
        ref = load_frame(req.ref_path, req.fmt, req.width, req.height)
        with open(req.bitstream_path, "rb") as handle:
            raw = handle.read()
        result = decode_pframe(models, ref, raw)
        save_yuv420(req.out_path, result.frame)
        return DecodeResponse(
            out_path=req.out_path,
            mode=result.mode,
            width=result.frame.width,
            height=result.frame.height,
        )

    @app.post("/train", response_model=TrainResponse)
    def train(req: TrainRequest) -> TrainResponse:
        config = parse_train_config(req.config_path, stage=req.stage)
        out = train_stage(
            req.stage, None, req.checkpoint_in, config, req.checkpoint_out, req.log_path
        )
        return TrainResponse(checkpoint_out=out, stage=req.stage, steps=config.max_steps)

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(req: EvalRequest) -> EvalResponse:
        models = cache.get(req.model_path)
        report = evaluate_corpus(
            req.manifest_path,
            models,
            req.budget_bytes,
            req.out_dir,
            fmt=req.fmt,
            width=req.width,
            height=req.height,
            metric_planes=req.metric_planes,
        )
        rows = [
            FrameRow(
                identifier=s.identifier,
                size=s.size,
                bits=s.bits,
                bpp=s.bpp,
                msssim=s.msssim,
                psnr_db=s.psnr_db,
                mode=s.mode,
                mv_bits=s.mv_bits,
            )
            for s in report.scores
        ]
        return EvalResponse(
            out_dir=req.out_dir,
            report_path=os.path.join(req.out_dir, "report.json"),
            frames=len(report.scores),
            failures=len(report.failures),
            weighted_msssim=report.weighted_msssim,
            weighted_psnr=report.weighted_psnr,
            total_bytes=report.total_bytes,
            budget_bytes=report.budget_bytes,
            budget_ok=report.budget_ok,
            mv_bit_share=report.mv_bit_share,
            bypass_fraction=report.bypass_fraction,
            rows=rows,
        )

    return app
