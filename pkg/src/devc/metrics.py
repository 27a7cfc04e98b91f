"""Quality metrics: multi-scale SSIM, PSNR, and size-weighted aggregation.

The MS-SSIM core is differentiable torch (it is also the stage-3 training
distortion).  Numpy plane/frame wrappers convert and reduce.

Scale rule: use the largest s <= 5 with floor(min_dim / 2^(s-1)) >= 10 and
renormalize the first s canonical weights to sum 1.  The Gaussian window
(sigma 1.5, nominally 11 taps) shrinks to the largest odd size that fits the
coarsest scale.  Frames of min dimension >= 160 therefore get the standard
5 scales.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import GeometryError, NumericError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP_DB = 99.0
_K1 = 0.01
_K2 = 0.03
_MIN_COARSE_DIM = 10


def ms_ssim_scale_count(height: int, width: int) -> int:
    """Number of MS-SSIM scales feasible for the given plane geometry."""
    min_dim = min(height, width)
    if min_dim < _MIN_COARSE_DIM:
        raise GeometryError(f"plane {width}x{height} too small for MS-SSIM")
    s = 1
    while s < 5 and (min_dim >> s) >= _MIN_COARSE_DIM:
        s += 1
    return s


def _window_size(height: int, width: int, scales: int) -> int:
    coarse = min(height, width) >> (scales - 1)
    win = min(11, coarse)
    if win % 2 == 0:
        win -= 1
    return win


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    return (g / g.sum()).reshape(1, 1, size)

def _gaussian_filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    w = win.expand(c, 1, -1)
    out = F.conv2d(x, w.unsqueeze(2), groups=c)
    return F.conv2d(out, w.unsqueeze(3), groups=c)


def _ssim_and_cs(a: torch.Tensor, b: torch.Tensor, win: torch.Tensor, data_range: float):
    c1 = (_K1 * data_range) ** 2
    c2 = (_K2 * data_range) ** 2
    mu_a = _gaussian_filter(a, win)
    mu_b = _gaussian_filter(b, win)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    sigma_aa = _gaussian_filter(a * a, win) - mu_aa
    sigma_bb = _gaussian_filter(b * b, win) - mu_bb
    sigma_ab = _gaussian_filter(a * b, win) - mu_ab
    cs_map = (2 * sigma_ab + c2) / (sigma_aa + sigma_bb + c2)
    ssim_map = ((2 * mu_ab + c1) / (mu_aa + mu_bb + c1)) * cs_map
    return ssim_map.mean(dim=(1, 2, 3)), cs_map.mean(dim=(1, 2, 3))


def ms_ssim_torch(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Differentiable MS-SSIM over (B, C, H, W) tensors; returns (B,) scores."""
    if a.shape != b.shape:
        raise GeometryError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 4:
        raise GeometryError(f"expected 4D tensors, got {a.dim()}D")
    h, w = int(a.shape[2]), int(a.shape[3])
    scales = ms_ssim_scale_count(h, w)
    win_size = _window_size(h, w, scales)
    win = _gaussian_window(win_size, 1.5, a.dtype, a.device)
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=a.dtype, device=a.device)
    weights = weights / weights.sum()
    values = []
    x, y = a, b
    for level in range(scales):
        ssim_val, cs_val = _ssim_and_cs(x, y, win, data_range)
        if level < scales - 1:
            values.append(torch.relu(cs_val))
            pad = (int(x.shape[3]) % 2, 0, int(x.shape[2]) % 2, 0)
            if pad[0] or pad[2]:
                x = F.pad(x, pad, mode="replicate")
                y = F.pad(y, pad, mode="replicate")
            x = F.avg_pool2d(x, kernel_size=2)
            y = F.avg_pool2d(y, kernel_size=2)
        else:
            values.append(torch.relu(ssim_val))
    stacked = torch.stack(values, dim=0)
    return torch.prod(stacked ** weights.reshape(-1, 1), dim=0)


def ms_ssim_plane(a: np.ndarray, b: np.ndarray) -> float:
    """MS-SSIM between two uint8 planes."""
    if a.shape != b.shape:
        raise GeometryError(f"plane shape mismatch {a.shape} vs {b.shape}")
    ta = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32) / 255.0)[None, None]
    tb = torch.from_numpy(np.ascontiguousarray(b, dtype=np.float32) / 255.0)[None, None]
    with torch.no_grad():
        return float(ms_ssim_torch(ta, tb, data_range=1.0)[0])


def ms_ssim_frame(a, b) -> float:
    """Pixel-count-weighted MS-SSIM over the Y, U, V planes of two frames."""
    if (a.height, a.width) != (b.height, b.width):
        raise GeometryError("frame geometry mismatch")
    total = 0.0
    weight = 0
    for (_, pa), (_, pb) in zip(a.planes(), b.planes()):
        total += ms_ssim_plane(pa, pb) * pa.size
        weight += pa.size
    return total / weight


def psnr_plane(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB between two uint8 planes, capped at the 99 dB sentinel."""
    if a.shape != b.shape:
        raise GeometryError(f"plane shape mismatch {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(255.0**2 / mse), PSNR_CAP_DB)


def psnr_frame(a, b) -> float:
    """PSNR over all three planes pooled by total squared error."""
    if (a.height, a.width) != (b.height, b.width):
        raise GeometryError("frame geometry mismatch")
    sse = 0.0
    count = 0
    for (_, pa), (_, pb) in zip(a.planes(), b.planes()):
        diff = pa.astype(np.float64) - pb.astype(np.float64)
        sse += float(np.sum(diff * diff))
        count += pa.size
    mse = sse / count
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(255.0**2 / mse), PSNR_CAP_DB)


def aggregate_weighted(scores: Sequence[float], sizes: Sequence[float]) -> float:
    """Size-weighted corpus score: sum(score * size) / sum(size) in float64."""
    s = np.asarray(scores, dtype=np.float64)
    w = np.asarray(sizes, dtype=np.float64)
    if s.shape != w.shape or s.ndim != 1:
        raise GeometryError(f"scores {s.shape} and sizes {w.shape} must be equal-length 1D")
    if s.size == 0:
        raise NumericError("cannot aggregate an empty corpus")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(w))):
        raise NumericError("aggregation requires finite scores and sizes")
    if np.any(w < 0) or float(w.sum()) <= 0:
        raise NumericError("sizes must be non-negative with positive total")
    return float((s * w).sum() / w.sum())
