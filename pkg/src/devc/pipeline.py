"""P-frame codec pipeline: model bundle, checkpoints, encode, decode.

Encoding codes the estimated motion field, measures whether motion
compensation actually helps (bypass decision), codes per-plane residuals,
and assembles the container.  The reconstruction the encoder reports is
produced by literally running the decoder on the emitted bytes, so encoder
and decoder cannot drift apart.

All coding-path model evaluation runs under no_grad in eval mode; the
entropy-coded grids go through the SequentialScan reference path, which is
what makes reconstructions byte-exact across encoder and decoder instances
loaded from the same checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .coder import Payload, RangeDecoder, RangeEncoder
from .compressor import (
    PlaneCompressor,
    SequentialScan,
    count_parameters,
    decode_hyper,
    encode_hyper,
    hyper_symbol_count,
)
from .container import (
    ENTRY_ORDER,
    MODE_BYPASS,
    MODE_MC,
    PAD_MULTIPLE,
    Bitstream,
    expected_pads,
)
from .errors import GeometryError, ModelError, ProtocolError
from .frames import FramePair, YUVFrame, denormalize_plane, normalize_plane
from .metrics import ms_ssim_frame, psnr_frame
from .motion import MotionEstimator, scale_flow_for_chroma, warp
from .refine import FrameRefineNet, MotionRefineNet

PAYLOAD_FRAMING_BITS = 128  # 8-byte payload header + 8-byte coder flush


@dataclass(frozen=True)
class CodecConfig:
    """Architecture switches; stored in every checkpoint and bitstream-free."""

    width: int = 64
    use_attention: bool = True
    motion_levels: int = 4
    flow_magnitude: float = 64.0
    refine_channels: int = 64
    refine_blocks: int = 2
    mv_refine_channels: int = 32
    mv_refine_blocks: int = 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "CodecConfig":
        try:
            data = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise ModelError(f"invalid checkpoint config: {exc}") from exc
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ModelError(f"unknown config fields {sorted(extra)}")
        return cls(**data)


class CodecModels:
    """All trainable parts of the codec plus bookkeeping counters."""

    GROUPS = ("motion", "mv_comp", "res_comp", "mv_refiner", "frame_refiner")

    def __init__(self, config: CodecConfig):
        self.config = config
        self.motion = MotionEstimator(
            levels=config.motion_levels, max_flow=config.flow_magnitude
        )
        self.mv_comp = PlaneCompressor("flow", config.width, config.use_attention)
        self.res_comp = PlaneCompressor("residual", config.width, config.use_attention)
        self.mv_refiner = MotionRefineNet(
            channels=config.mv_refine_channels, blocks=config.mv_refine_blocks
        )
        self.frame_refiner = FrameRefineNet(
            channels=config.refine_channels, blocks_per_scale=config.refine_blocks
        )
        self.counters: Dict[str, int] = {"motion_decodes": 0, "frame_decodes": 0}

    def modules(self) -> Dict[str, torch.nn.Module]:
        return {
            "motion": self.motion,
            "mv_comp": self.mv_comp,
            "res_comp": self.res_comp,
            "mv_refiner": self.mv_refiner,
            "frame_refiner": self.frame_refiner,
        }

    def eval_mode(self) -> "CodecModels":
        for m in self.modules().values():
            m.eval()
        return self

    def train_mode(self) -> "CodecModels":
        for m in self.modules().values():
            m.train()
        return self

    def parameter_count(self) -> int:
        return sum(count_parameters(m) for m in self.modules().values())

    def reset_counters(self) -> None:
        for key in self.counters:
            self.counters[key] = 0


def build_models(config: CodecConfig | None = None, seed: int | None = None) -> CodecModels:
    if seed is not None:
        torch.manual_seed(seed)
    return CodecModels(config or CodecConfig()).eval_mode()


def _state_arrays(models: CodecModels) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    for group, module in models.modules().items():
        for name, tensor in module.state_dict().items():
            arrays[f"w/{group}/{name}"] = tensor.detach().cpu().numpy()
    return arrays


def _fingerprint(config_json: str, arrays: Dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256(config_json.encode())
    for name in sorted(arrays):
        digest.update(name.encode())
        digest.update(str(arrays[name].shape).encode())
        digest.update(arrays[name].tobytes())
    return digest.hexdigest()


def save_checkpoint(path: str, models: CodecModels, metadata: dict | None = None) -> None:
    arrays = _state_arrays(models)
    config_json = models.config.to_json()
    meta = dict(metadata or {})
    meta["fingerprint"] = _fingerprint(config_json, arrays)
    np.savez(
        path,
        __config__=np.frombuffer(config_json.encode(), dtype=np.uint8),
        __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        **arrays,
    )


def load_checkpoint(path: str) -> Tuple[CodecModels, dict]:
    try:
        blob = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ModelError(f"cannot read checkpoint {path!r}: {exc}") from exc
    with blob:
        names = set(blob.files)
        if "__config__" not in names or "__meta__" not in names:
            raise ModelError(f"checkpoint {path!r} missing config or metadata")
        config_json = blob["__config__"].tobytes().decode()
        meta = json.loads(blob["__meta__"].tobytes().decode())
        config = CodecConfig.from_json(config_json)
        models = CodecModels(config)
        arrays = {n: blob[n] for n in names if n.startswith("w/")}
    if _fingerprint(config_json, arrays) != meta.get("fingerprint"):
        raise ModelError(f"checkpoint {path!r} fingerprint mismatch")
    for group, module in models.modules().items():
        prefix = f"w/{group}/"
        state = {}
        for key, arr in arrays.items():
            if key.startswith(prefix):
                state[key[len(prefix):]] = torch.from_numpy(arr.copy())
        try:
            module.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise ModelError(f"checkpoint group {group!r} does not fit: {exc}") from exc
    return models.eval_mode(), meta


@dataclass
class RDStats:
    """Per-frame rate/distortion accounting."""

    mode: str
    total_bits: int
    header_bits: int
    mv_bits: int
    residual_bits: int
    estimated_bits: float
    bpp: float
    msssim: float
    psnr_db: float
    flow_clamped: int


@dataclass
class EncodeResult:
    bitstream: bytes
    reconstruction: YUVFrame
    stats: RDStats


@dataclass
class DecodeResult:
    frame: YUVFrame
    mode: str


def bypass_decide(fd_energy: float, mcfd_energy: float) -> str:
    """Bypass only when motion compensation strictly hurts; ties stay MC."""
    return MODE_BYPASS if mcfd_energy > fd_energy else MODE_MC


def _pad_to_multiple(plane: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    h, w = plane.shape[-2:]
    pb, pr = (-h) % multiple, (-w) % multiple
    if pb == 0 and pr == 0:
        return plane
    pad = [(0, 0)] * (plane.ndim - 2) + [(0, pb), (0, pr)]
    mode = "reflect" if pb < h and pr < w else "edge"
    return np.pad(plane, pad, mode=mode)


def _latent_grid(h: int, w: int) -> Tuple[int, int]:
    hp, wp = h + (-h) % PAD_MULTIPLE, w + (-w) % PAD_MULTIPLE
    return hp // PAD_MULTIPLE, wp // PAD_MULTIPLE


def _padded_size(h: int, w: int) -> Tuple[int, int]:
    return h + (-h) % PAD_MULTIPLE, w + (-w) % PAD_MULTIPLE


def _code_grid(comp: PlaneCompressor, x: torch.Tensor) -> Tuple[Payload, np.ndarray, float]:
    """Encode one padded plane as a single payload (hyper bits then scan bits)."""
    with torch.no_grad():
        y, _ = comp.latents(x)
        z = comp.hyper_encoder(y)
        z_int = torch.round(z).clamp(-128, 127).to(torch.int32)
        grid = (int(y.shape[2]), int(y.shape[3]))
        hyper_feat = comp.hyper_decoder(z_int.float(), grid)
    encoder = RangeEncoder()
    z_np = z_int[0].cpu().numpy()
    bits_h = encode_hyper(z_np, comp.prior.cdf_table(), encoder)
    scan = SequentialScan(comp.context, hyper_feat)
    y_hat, bits_m = scan.encode(y[0].cpu().numpy().astype(np.float32), encoder)
    n = scan.symbol_count() + hyper_symbol_count(
        (math.ceil(grid[0] / 4), math.ceil(grid[1] / 4)), comp.width
    )
    payload = Payload(symbol_count=n, data=encoder.finish())
    return payload, y_hat, bits_h + bits_m


def _decode_grid(comp: PlaneCompressor, payload: Payload, grid: Tuple[int, int]) -> np.ndarray:
    """Mirror of _code_grid."""
    hyper_grid = (math.ceil(grid[0] / 4), math.ceil(grid[1] / 4))
    expected = comp.width * grid[0] * grid[1] + hyper_symbol_count(hyper_grid, comp.width)
    if payload.symbol_count != expected:
        raise ProtocolError(
            f"payload declares {payload.symbol_count} symbols, grid needs {expected}"
        )
    decoder = RangeDecoder(payload.data)
    z_np = decode_hyper(hyper_grid, comp.prior.cdf_table(), decoder, comp.width)
    with torch.no_grad():
        hyper_feat = comp.hyper_decoder(torch.from_numpy(z_np).float().unsqueeze(0), grid)
    scan = SequentialScan(comp.context, hyper_feat)
    return scan.decode(decoder)


def _code_flow_grid(comp: PlaneCompressor, x: torch.Tensor):
    """Flow planes use two payloads: hyper ints and main scan."""
    with torch.no_grad():
        y, _ = comp.latents(x)
        z = comp.hyper_encoder(y)
        z_int = torch.round(z).clamp(-128, 127).to(torch.int32)
        grid = (int(y.shape[2]), int(y.shape[3]))
        hyper_feat = comp.hyper_decoder(z_int.float(), grid)
    enc_h = RangeEncoder()
    z_np = z_int[0].cpu().numpy()
    bits_h = encode_hyper(z_np, comp.prior.cdf_table(), enc_h)
    payload_h = Payload(symbol_count=int(z_np.size) * 8, data=enc_h.finish())
    enc_m = RangeEncoder()
    scan = SequentialScan(comp.context, hyper_feat)
    y_hat, bits_m = scan.encode(y[0].cpu().numpy().astype(np.float32), enc_m)
    payload_m = Payload(symbol_count=scan.symbol_count(), data=enc_m.finish())
    return payload_h, payload_m, y_hat, bits_h + bits_m


def _decode_flow_grid(
    comp: PlaneCompressor,
    payload_h: Payload,
    payload_m: Payload,
    grid: Tuple[int, int],
) -> np.ndarray:
    hyper_grid = (math.ceil(grid[0] / 4), math.ceil(grid[1] / 4))
    if payload_h.symbol_count != hyper_symbol_count(hyper_grid, comp.width):
        raise ProtocolError(
            f"mv hyper payload declares {payload_h.symbol_count} symbols, "
            f"grid needs {hyper_symbol_count(hyper_grid, comp.width)}"
        )
    dec_h = RangeDecoder(payload_h.data)
    z_np = decode_hyper(hyper_grid, comp.prior.cdf_table(), dec_h, comp.width)
    with torch.no_grad():
        hyper_feat = comp.hyper_decoder(torch.from_numpy(z_np).float().unsqueeze(0), grid)
    scan = SequentialScan(comp.context, hyper_feat)
    if payload_m.symbol_count != scan.symbol_count():
        raise ProtocolError(
            f"mv payload declares {payload_m.symbol_count} symbols, "
            f"grid needs {scan.symbol_count()}"
        )
    return scan.decode(RangeDecoder(payload_m.data))


def _flow_from_latents(
    models: CodecModels, y_hat: np.ndarray, size: Tuple[int, int]
) -> torch.Tensor:
    """Shared decoder tail: synthesize, crop, denormalize, refine."""
    h, w = size
    hp, wp = _padded_size(h, w)
    with torch.no_grad():
        norm = models.mv_comp.reconstruct(y_hat, (hp, wp))[:, :, :h, :w]
        flow = torch.from_numpy(
            denormalize_plane(norm.cpu().numpy(), "flow", models.config.flow_magnitude)
        )
        return models.mv_refiner(flow)


def _residual_from_latents(
    comp: PlaneCompressor, y_hat: np.ndarray, size: Tuple[int, int]
) -> torch.Tensor:
    h, w = size
    hp, wp = _padded_size(h, w)
    with torch.no_grad():
        return comp.reconstruct(y_hat, (hp, wp))[:, :, :h, :w]


def _norm_tensor(plane: np.ndarray) -> torch.Tensor:
    norm, _ = normalize_plane(plane, "image")
    return torch.from_numpy(norm).unsqueeze(0).unsqueeze(0)


def _plane_flows(models: CodecModels, flow: torch.Tensor, frame: YUVFrame):
    ch, cw = frame.u.shape
    chroma = scale_flow_for_chroma(flow, (ch, cw))
    return {"y": flow, "u": chroma, "v": chroma}


def _reconstruct_plane(
    models: CodecModels, basis: torch.Tensor, residual: torch.Tensor
) -> np.ndarray:
    with torch.no_grad():
        refined = models.frame_refiner(basis, residual)
    return denormalize_plane(refined[0, 0].cpu().numpy(), "image")


def encode_pframe(
    models: CodecModels,
    pair: FramePair,
    force_mode: Optional[str] = None,
) -> EncodeResult:
    """Encode target given reference; returns bytes, the decoder's exact
    reconstruction, and rate/distortion statistics."""
    if force_mode not in (None, MODE_MC, MODE_BYPASS):
        raise ProtocolError(f"unknown forced mode {force_mode!r}")
    models.eval_mode()
    ref, target = pair.ref, pair.target
    h, w = ref.height, ref.width
    ref_t = {name: _norm_tensor(plane) for name, plane in ref.planes()}
    tgt_t = {name: _norm_tensor(plane) for name, plane in target.planes()}

    entries: Dict[str, Optional[Payload]] = {name: None for name in ENTRY_ORDER}
    estimated_bits = 0.0
    flow_clamped = 0
    mode = force_mode

    basis = {name: ref_t[name] for name, _ in ref.planes()}
    if force_mode != MODE_BYPASS:
        with torch.no_grad():
            pyramid = models.motion(ref_t["y"], tgt_t["y"])
        raw_flow = pyramid.finest[0].cpu().numpy()
        norm_flow, flow_clamped = normalize_plane(
            raw_flow, "flow", models.config.flow_magnitude
        )
        x_mv = torch.from_numpy(_pad_to_multiple(norm_flow)).unsqueeze(0)
        payload_h, payload_m, y_hat_mv, mv_model_bits = _code_flow_grid(models.mv_comp, x_mv)
        flow_hat = _flow_from_latents(models, y_hat_mv, (h, w))
        warped = {
            name: warp(ref_t[name], plane_flow)
            for name, plane_flow in _plane_flows(models, flow_hat, ref).items()
        }
        fd_energy = 0.0
        mcfd_energy = 0.0
        for name in ("y", "u", "v"):
            fd = (tgt_t[name] - ref_t[name]).numpy().astype(np.float64)
            mcfd = (tgt_t[name] - warped[name]).numpy().astype(np.float64)
            fd_energy += float((fd * fd).sum())
            mcfd_energy += float((mcfd * mcfd).sum())
        if mode is None:
            mode = bypass_decide(fd_energy, mcfd_energy)
        if mode == MODE_MC:
            entries["mv"] = payload_m
            entries["mv_hyper"] = payload_h
            estimated_bits += mv_model_bits + 2 * PAYLOAD_FRAMING_BITS
            basis = warped

    for name in ("y", "u", "v"):
        residual = (tgt_t[name] - basis[name])[0].cpu().numpy()
        x = torch.from_numpy(_pad_to_multiple(residual)).unsqueeze(0)
        payload, y_hat, bits = _code_grid(models.res_comp, x)
        entries[f"{name}_res"] = payload
        estimated_bits += bits + PAYLOAD_FRAMING_BITS

    stream = Bitstream(width=w, height=h, mode=mode, entries=entries)
    raw = stream.to_bytes()
    decoded = decode_pframe(models, ref, raw)
    recon = decoded.frame

    total_bits = 8 * len(raw)
    mv_bits = 8 * sum(
        entries[k].size_bytes + 4 for k in ("mv", "mv_hyper") if entries[k] is not None
    )
    residual_bits = 8 * sum(
        entries[f"{n}_res"].size_bytes + 4 for n in ("y", "u", "v")
    )
    stats = RDStats(
        mode=mode,
        total_bits=total_bits,
        header_bits=total_bits - mv_bits - residual_bits,
        mv_bits=mv_bits,
        residual_bits=residual_bits,
        estimated_bits=estimated_bits,
        bpp=total_bits / float(w * h),
        msssim=ms_ssim_frame(target, recon),
        psnr_db=psnr_frame(target, recon),
        flow_clamped=flow_clamped,
    )
    return EncodeResult(bitstream=raw, reconstruction=recon, stats=stats)


def decode_pframe(models: CodecModels, ref: YUVFrame, raw: bytes) -> DecodeResult:
    """Decode one coded frame against its reference."""
    models.eval_mode()
    stream = Bitstream.from_bytes(raw)
    if (stream.width, stream.height) != (ref.width, ref.height):
        raise GeometryError(
            f"bitstream geometry {stream.width}x{stream.height} does not match "
            f"reference {ref.width}x{ref.height}"
        )
    h, w = ref.height, ref.width
    ref_t = {name: _norm_tensor(plane) for name, plane in ref.planes()}
    models.counters["frame_decodes"] += 1

    if stream.mode == MODE_MC:
        models.counters["motion_decodes"] += 1
        grid = _latent_grid(h, w)
        y_hat_mv = _decode_flow_grid(
            models.mv_comp, stream.entries["mv_hyper"], stream.entries["mv"], grid
        )
        flow_hat = _flow_from_latents(models, y_hat_mv, (h, w))
        basis = {
            name: warp(ref_t[name], plane_flow)
            for name, plane_flow in _plane_flows(models, flow_hat, ref).items()
        }
    else:
        basis = ref_t

    planes: Dict[str, np.ndarray] = {}
    for name in ("y", "u", "v"):
        ph, pw = basis[name].shape[2], basis[name].shape[3]
        grid = _latent_grid(int(ph), int(pw))
        y_hat = _decode_grid(models.res_comp, stream.entries[f"{name}_res"], grid)
        residual = _residual_from_latents(models.res_comp, y_hat, (int(ph), int(pw)))
        planes[name] = _reconstruct_plane(models, basis[name], residual)

    frame = YUVFrame(y=planes["y"], u=planes["u"], v=planes["v"])
    return DecodeResult(frame=frame, mode=stream.mode)
