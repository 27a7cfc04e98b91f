"""Frame ingestion, color conversion, plane normalization, and manifests.

Frames live in planar YUV 4:2:0 (BT.601 full range).  RGB sources are
converted with one rounding step at the end of each plane computation;
chroma is box-averaged 2x2 before rounding.  Rounding is half away from
zero everywhere so encode and decode agree bit for bit.

Plane normalization kinds:
  image     [0, 255]    -> [0, 1]   via x / 255
  residual  [-255, 255] -> [-1, 1]  via x / 255
  flow      [-M, M]     -> [0, 1]   via (x + M) / (2 M), out-of-range inputs
                                     clamped and counted
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, List, Tuple

import numpy as np

from .errors import GeometryError, IngestionError, NumericError

FLOW_MAGNITUDE = 64.0

_RGB_TO_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ],
    dtype=np.float64,
)

_YUV_TO_RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ],
    dtype=np.float64,
)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


@dataclass(frozen=True)
class YUVFrame:
    """One planar 4:2:0 frame; chroma planes are half size in each axis."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        h, w = self.y.shape
        if h % 2 or w % 2 or h == 0 or w == 0:
            raise GeometryError(f"frame dimensions {w}x{h} must be even and nonzero")
        for name, plane in (("y", self.y), ("u", self.u), ("v", self.v)):
            if plane.dtype != np.uint8:
                raise NumericError(f"plane {name} must be uint8, got {plane.dtype}")
        if self.u.shape != (h // 2, w // 2) or self.v.shape != (h // 2, w // 2):
            raise GeometryError(
                f"chroma shapes {self.u.shape}/{self.v.shape} do not match luma {self.y.shape}"
            )

    @property
    def height(self) -> int:
        return self.y.shape[0]

    @property
    def width(self) -> int:
        return self.y.shape[1]

    @property
    def pixel_count(self) -> int:
        return self.y.size + self.u.size + self.v.size

    def planes(self) -> List[Tuple[str, np.ndarray]]:
        return [("y", self.y), ("u", self.u), ("v", self.v)]

    def to_bytes(self) -> bytes:
        return self.y.tobytes() + self.u.tobytes() + self.v.tobytes()


@dataclass(frozen=True)
class FramePair:
    """Reference frame and the target frame to be predicted from it."""

    ref: YUVFrame
    target: YUVFrame
    identifier: str = ""

    def __post_init__(self):
        if self.ref.y.shape != self.target.y.shape:
            raise GeometryError(
                f"reference {self.ref.y.shape} and target {self.target.y.shape} differ"
            )


def rgb_to_yuv420(rgb: np.ndarray) -> YUVFrame:
    """Convert an (H, W, 3) uint8 RGB image to planar YUV 4:2:0."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise GeometryError(f"expected (H, W, 3) RGB array, got {rgb.shape}")
    h, w = rgb.shape[:2]
    if h % 2 or w % 2:
        raise GeometryError(f"RGB dimensions {w}x{h} must be even for 4:2:0")
    flat = rgb.reshape(-1, 3).astype(np.float64)
    yuv = flat @ _RGB_TO_YUV.T
    y = yuv[:, 0].reshape(h, w)
    u = yuv[:, 1].reshape(h, w) + 128.0
    v = yuv[:, 2].reshape(h, w) + 128.0
    y8 = np.clip(round_half_away(y), 0, 255).astype(np.uint8)
    u_sub = u.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    v_sub = v.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    u8 = np.clip(round_half_away(u_sub), 0, 255).astype(np.uint8)
    v8 = np.clip(round_half_away(v_sub), 0, 255).astype(np.uint8)
    return YUVFrame(y=y8, u=u8, v=v8)


def yuv420_to_rgb(frame: YUVFrame) -> np.ndarray:
    """Convert a frame back to (H, W, 3) uint8 RGB (nearest chroma upsampling)."""
    y = frame.y.astype(np.float64)
    u = np.repeat(np.repeat(frame.u, 2, axis=0), 2, axis=1).astype(np.float64) - 128.0
    v = np.repeat(np.repeat(frame.v, 2, axis=0), 2, axis=1).astype(np.float64) - 128.0
    stacked = np.stack([y, u, v], axis=-1)
    rgb = stacked @ _YUV_TO_RGB.T
    return np.clip(round_half_away(rgb), 0, 255).astype(np.uint8)


def load_yuv420(path: str, width: int, height: int) -> YUVFrame:
    """Read one planar YUV 4:2:0 frame from a raw file of exactly one frame."""
    if width <= 0 or height <= 0 or width % 2 or height % 2:
        raise GeometryError(f"invalid raw frame geometry {width}x{height}")
    expected = width * height * 3 // 2
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IngestionError(f"cannot read raw frame {path!r}: {exc}") from exc
    if len(raw) != expected:
        raise IngestionError(
            f"raw frame {path!r} holds {len(raw)} bytes, expected {expected} for {width}x{height}"
        )
    ysize = width * height
    csize = ysize // 4
    y = np.frombuffer(raw, dtype=np.uint8, count=ysize).reshape(height, width)
    u = np.frombuffer(raw, dtype=np.uint8, count=csize, offset=ysize).reshape(
        height // 2, width // 2
    )
    v = np.frombuffer(raw, dtype=np.uint8, count=csize, offset=ysize + csize).reshape(
        height // 2, width // 2
    )
    return YUVFrame(y=y.copy(), u=u.copy(), v=v.copy())


def save_yuv420(path: str, frame: YUVFrame) -> None:
    """Write one frame as raw planar YUV 4:2:0 (Y then U then V)."""
    with open(path, "wb") as fh:
        fh.write(frame.to_bytes())


def load_image(path: str) -> YUVFrame:
    """Read an RGB image file (PNG etc.) and convert to YUV 4:2:0."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise IngestionError(f"cannot read image {path!r}: {exc}") from exc
    return rgb_to_yuv420(rgb)


def load_frame(path: str, fmt: str, width: int | None = None, height: int | None = None) -> YUVFrame:
    if fmt == "raw-yuv420":
        if width is None or height is None:
            raise IngestionError("raw-yuv420 frames need explicit width and height")
        return load_yuv420(path, width, height)
    if fmt == "image-pair":
        return load_image(path)
    raise IngestionError(f"unknown frame format {fmt!r}")


def load_frame_pair(
    ref_path: str,
    target_path: str,
    fmt: str = "image-pair",
    width: int | None = None,
    height: int | None = None,
) -> FramePair:
    """Load a (reference, target) frame pair in the given source format."""
    ref = load_frame(ref_path, fmt, width, height)
    target = load_frame(target_path, fmt, width, height)
    if (ref.height, ref.width) != (target.height, target.width):
        raise IngestionError(
            f"frame pair geometry mismatch: {ref_path!r} is {ref.width}x{ref.height}, "
            f"{target_path!r} is {target.width}x{target.height}"
        )
    return FramePair(ref=ref, target=target)


def normalize_plane(values, kind: str, flow_magnitude: float = FLOW_MAGNITUDE):
    """Map a plane into its normalized network range.

    Returns (normalized float32 array, clamped sample count).  Only the flow
    kind can clamp; the other kinds reject out-of-range input instead.
    """
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError(f"normalize({kind}) requires finite input")
    if kind == "image":
        if x.size and (x.min() < 0 or x.max() > 255):
            raise NumericError("image plane values outside [0, 255]")
        return (x / 255.0).astype(np.float32), 0
    if kind == "residual":
        if x.size and (x.min() < -255 or x.max() > 255):
            raise NumericError("residual plane values outside [-255, 255]")
        return (x / 255.0).astype(np.float32), 0
    if kind == "flow":
        m = float(flow_magnitude)
        if m <= 0:
            raise NumericError(f"flow magnitude {m} must be positive")
        clamped = int(np.count_nonzero((x < -m) | (x > m)))
        x = np.clip(x, -m, m)
        return ((x + m) / (2.0 * m)).astype(np.float32), clamped
    raise NumericError(f"unknown normalization kind {kind!r}")


def denormalize_plane(values, kind: str, flow_magnitude: float = FLOW_MAGNITUDE):
    """Inverse of normalize_plane.

    image kind returns uint8 (rounded, clipped); residual and flow kinds
    return float arrays in their natural units.
    """
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError(f"denormalize({kind}) requires finite input")
    if kind == "image":
        return np.clip(round_half_away(x * 255.0), 0, 255).astype(np.uint8)
    if kind == "residual":
        return (x * 255.0).astype(np.float32)
    if kind == "flow":
        m = float(flow_magnitude)
        if m <= 0:
            raise NumericError(f"flow magnitude {m} must be positive")
        return (x * (2.0 * m) - m).astype(np.float32)
    raise NumericError(f"unknown normalization kind {kind!r}")


def pad_amounts(height: int, width: int, multiple: int = 16) -> Tuple[int, int]:
    """(pad_bottom, pad_right) growing each axis to the next multiple."""
    return (-height) % multiple, (-width) % multiple


@dataclass(frozen=True)
class ManifestEntry:
    identifier: str
    ref_path: str
    target_path: str


def parse_manifest(path: str) -> List[ManifestEntry]:
    """Read a tab-separated corpus manifest: identifier, ref path, target path.

    Blank lines and lines starting with # are skipped.  Relative paths are
    resolved against the manifest's directory.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {path!r}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise IngestionError(
                f"manifest {path!r} line {lineno}: expected 3 tab-separated fields, got {len(parts)}"
            )
        identifier, ref_path, target_path = (p.strip() for p in parts)
        if not identifier or not ref_path or not target_path:
            raise IngestionError(f"manifest {path!r} line {lineno}: empty field")
        if identifier in seen:
            raise IngestionError(f"manifest {path!r} line {lineno}: duplicate id {identifier!r}")
        seen.add(identifier)
        if not os.path.isabs(ref_path):
            ref_path = os.path.join(base, ref_path)
        if not os.path.isabs(target_path):
            target_path = os.path.join(base, target_path)
        entries.append(ManifestEntry(identifier, ref_path, target_path))
    return entries


def iter_manifest_pairs(
    entries: Iterable[ManifestEntry],
    fmt: str = "image-pair",
    width: int | None = None,
    height: int | None = None,
):
    for entry in entries:
        yield entry, load_frame_pair(entry.ref_path, entry.target_path, fmt, width, height)
