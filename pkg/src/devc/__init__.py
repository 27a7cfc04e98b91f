"""devc: a desk-scale learned P-frame video codec.

Encode a target frame against a decoded reference: estimate motion, code
the flow field and per-plane residuals with learned compressors and a
binary range coder, and reconstruct through refinement networks.  The
decoder is a strict subset of the encoder, so encoder-reported
reconstructions are bit-exact decoder outputs.
"""

from .coder import (
    Payload,
    RangeDecoder,
    RangeEncoder,
    dequantize,
    quantize,
    quantize_probability,
    range_decode,
    range_encode,
)
from .container import Bitstream, MODE_BYPASS, MODE_MC
from .errors import (
    ChecksumError,
    ConfigError,
    DevcError,
    GeometryError,
    IngestionError,
    ModelError,
    NumericError,
    ProtocolError,
)
from .evaluation import CorpusReport, FrameScore, aggregate_weighted, evaluate_corpus
from .frames import (
    FramePair,
    YUVFrame,
    load_frame,
    load_frame_pair,
    load_yuv420,
    rgb_to_yuv420,
    save_yuv420,
    yuv420_to_rgb,
)
from .metrics import ms_ssim_frame, ms_ssim_plane, psnr_frame, psnr_plane
from .pipeline import (
    CodecConfig,
    CodecModels,
    DecodeResult,
    EncodeResult,
    RDStats,
    build_models,
    bypass_decide,
    decode_pframe,
    encode_pframe,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    TrainConfig,
    make_corpus,
    make_training_batch,
    parse_train_config,
    rd_loss,
    run_stage,
    train_stage,
)

__version__ = "0.1.0"

__all__ = [
    "Bitstream",
    "ChecksumError",
    "CodecConfig",
    "CodecModels",
    "ConfigError",
    "CorpusReport",
    "DecodeResult",
    "DevcError",
    "EncodeResult",
    "FramePair",
    "FrameScore",
    "GeometryError",
    "IngestionError",
    "MODE_BYPASS",
    "MODE_MC",
    "ModelError",
    "NumericError",
    "Payload",
    "ProtocolError",
    "RDStats",
    "RangeDecoder",
    "RangeEncoder",
    "TrainConfig",
    "YUVFrame",
    "aggregate_weighted",
    "build_models",
    "bypass_decide",
    "decode_pframe",
    "dequantize",
    "encode_pframe",
    "evaluate_corpus",
    "load_checkpoint",
    "load_frame",
    "load_frame_pair",
    "load_yuv420",
    "make_corpus",
    "make_training_batch",
    "ms_ssim_frame",
    "ms_ssim_plane",
    "parse_train_config",
    "psnr_frame",
    "psnr_plane",
    "quantize",
    "quantize_probability",
    "range_decode",
    "range_encode",
    "rd_loss",
    "rgb_to_yuv420",
    "run_stage",
    "save_checkpoint",
    "save_yuv420",
    "train_stage",
    "yuv420_to_rgb",
    "__version__",
]
