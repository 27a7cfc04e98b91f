"""Sparse-signal compressor: transforms, hyperprior, and context model.

One PlaneCompressor handles one signal kind (2-channel flow fields or
1-channel residual planes), both normalized to their declared ranges:

  analysis   4 stride-2 5x5 convs (w, w, w, 2w channels)
  attention  1x1 projection 2w -> w gated by a learned sigmoid mask
  synthesis  mirrored stride-2 transposed convs, output clamped to range
  hyperprior 2 stride-2 convs down, 2 transposed convs up (w channels)

The context model predicts, per latent sample, a K=3 Gaussian mixture and a
probability p_plus of the +1 sign bit, from a channel-causal masked 5x5
convolution plus projected hyper features, through grouped per-channel 1x1
heads.  Coding order is channel-major then raster; a sample may depend on
every position of earlier channels and raster-earlier positions of its own.

Coding runs through SequentialScan, a numpy mirror of the grouped heads
whose per-sample arithmetic is identical on encoder and decoder, which makes
reconstructions byte-exact.  The parallel torch path exists for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .coder import RangeDecoder, RangeEncoder, quantize_probability
from .errors import GeometryError, NumericError

LATENT_CHANNELS = 64
MIXTURE_K = 3
CTX_FEATURES = 8
HYPER_FEATURES = 4
HEAD_HIDDEN = 24
SCALE_FLOOR = 1e-3
PROB_EPS = 1e-6
LIKELIHOOD_FLOOR = 1e-9
HYPER_BOUND = 128
HYPER_PARTITION_BITS = 8
_LOG2E = math.log2(math.e)

SIGNAL_KINDS = {
    "flow": {"channels": 2, "low": 0.0, "high": 1.0},
    "residual": {"channels": 1, "low": -1.0, "high": 1.0},
}


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _conv(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 5, stride=2, padding=2)


def _deconv(cin: int, cout: int) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(cin, cout, 5, stride=2, padding=2)


def _halving_sizes(height: int, width: int, steps: int) -> List[Tuple[int, int]]:
    """Sizes produced by repeated ceil-halving, starting at the input size."""
    sizes = [(height, width)]
    for _ in range(steps):
        h, w = sizes[-1]
        sizes.append((math.ceil(h / 2), math.ceil(w / 2)))
    return sizes


class AnalysisTransform(nn.Module):
    def __init__(self, in_channels: int, width: int, bottleneck: int):
        super().__init__()
        self.net = nn.Sequential(
            _conv(in_channels, width),
            nn.LeakyReLU(0.1, inplace=True),
            _conv(width, width),
            nn.LeakyReLU(0.1, inplace=True),
            _conv(width, width),
            nn.LeakyReLU(0.1, inplace=True),
            _conv(width, bottleneck),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class AttentionReduce(nn.Module):
    """Project bottleneck features to the latent width under a learned
    sigmoid mask: latent = proj(f) * mask(f)."""

    def __init__(self, bottleneck: int, width: int):
        super().__init__()
        self.proj = nn.Conv2d(bottleneck, width, 1)
        self.mask_net = nn.Sequential(
            nn.Conv2d(bottleneck, width, 1),
            nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
        )

    def forward(self, f: torch.Tensor, mask_override: torch.Tensor | None = None):
        lat = self.proj(f)
        mask = torch.sigmoid(self.mask_net(f)) if mask_override is None else mask_override
        return lat * mask, mask


class SynthesisTransform(nn.Module):
    def __init__(self, width: int, out_channels: int, low: float, high: float):
        super().__init__()
        self.low = low
        self.high = high
        self.stages = nn.ModuleList(
            [
                _deconv(width, width),
                _deconv(width, width),
                _deconv(width, width),
                _deconv(width, out_channels),
            ]
        )

    def forward(self, lat: torch.Tensor, out_size: Tuple[int, int]) -> torch.Tensor:
        sizes = _halving_sizes(out_size[0], out_size[1], 4)
        if (int(lat.shape[2]), int(lat.shape[3])) != sizes[4]:
            raise GeometryError(
                f"latent grid {tuple(lat.shape[2:])} cannot synthesize to {out_size}"
            )
        x = lat
        for i, stage in enumerate(self.stages):
            x = stage(x, output_size=sizes[3 - i])
            if i < 3:
                x = F.leaky_relu(x, 0.1, inplace=True)
        return x.clamp(self.low, self.high)


class HyperEncoder(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.net = nn.Sequential(
            _conv(width, width),
            nn.LeakyReLU(0.1, inplace=True),
            _conv(width, width),
        )

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y)


class HyperDecoder(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.up1 = _deconv(width, width)
        self.up2 = _deconv(width, width)

    def forward(self, z: torch.Tensor, out_size: Tuple[int, int]) -> torch.Tensor:
        sizes = _halving_sizes(out_size[0], out_size[1], 2)
        if (int(z.shape[2]), int(z.shape[3])) != sizes[2]:
            raise GeometryError(
                f"hyper grid {tuple(z.shape[2:])} cannot decode to {out_size}"
            )
        x = F.leaky_relu(self.up1(z, output_size=sizes[1]), 0.1, inplace=True)
        return self.up2(x, output_size=sizes[0])


class FactorizedLogisticPrior(nn.Module):
    """Per-channel logistic density over rounded hyper-latents."""

    def __init__(self, channels: int):
        super().__init__()
        self.loc = nn.Parameter(torch.zeros(channels))
        self.log_scale = nn.Parameter(torch.zeros(channels))

    def bin_mass(self, z: torch.Tensor) -> torch.Tensor:
        loc = self.loc.reshape(1, -1, 1, 1)
        scale = torch.exp(self.log_scale).reshape(1, -1, 1, 1)
        upper = torch.sigmoid((z + 0.5 - loc) / scale)
        lower = torch.sigmoid((z - 0.5 - loc) / scale)
        return (upper - lower).clamp_min(LIKELIHOOD_FLOOR)

    def rate_bits(self, z: torch.Tensor) -> torch.Tensor:
        return -torch.log2(self.bin_mass(z)).sum()

    def cdf_table(self) -> np.ndarray:
        """CDF at integer+0.5 edges from -bound-0.5 to +bound-0.5, per channel.

        table[c, i] = CDF_c(i - bound - 0.5) for i in 0..2*bound, so the mass
        of integer interval [lo, hi] is table[hi+bound+1] - table[lo+bound].
        """
        with torch.no_grad():
            loc = self.loc.detach().cpu().numpy().astype(np.float64)
            scale = np.exp(self.log_scale.detach().cpu().numpy().astype(np.float64))
        edges = np.arange(-HYPER_BOUND - 0.5, HYPER_BOUND + 0.5 + 1.0)
        x = (edges[None, :] - loc[:, None]) / scale[:, None]
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out


class ChannelCausalConv2d(nn.Conv2d):
    """5x5 conv masked for channel-major-then-raster coding order.

    Output group c (features c*F .. c*F+F-1) may read: all taps of input
    channels < c, strictly raster-earlier taps of channel c, nothing of
    later channels.
    """

    def __init__(self, channels: int, features: int, kernel: int = 5):
        super().__init__(channels, channels * features, kernel, padding=kernel // 2)
        mask = torch.zeros(channels * features, channels, kernel, kernel)
        center = kernel // 2
        for c in range(channels):
            rows = slice(c * features, (c + 1) * features)
            mask[rows, :c] = 1.0
            mask[rows, c, :center] = 1.0
            mask[rows, c, center, :center] = 1.0
        self.register_buffer("mask", mask)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(
            x, self.weight * self.mask, self.bias, self.stride, self.padding
        )


class ContextParams(NamedTuple):
    """Per-sample mixture and sign-bit parameters, each (B, C, [K,] h, w)."""

    weights: torch.Tensor
    means: torch.Tensor
    scales: torch.Tensor
    p_plus: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor


class ContextModel(nn.Module):
    def __init__(self, channels: int = LATENT_CHANNELS, k: int = MIXTURE_K):
        super().__init__()
        self.channels = channels
        self.k = k
        self.masked = ChannelCausalConv2d(channels, CTX_FEATURES)
        self.hyper_proj = nn.Conv2d(channels, channels * HYPER_FEATURES, 1)
        per_group_in = CTX_FEATURES + HYPER_FEATURES
        self.trunk = nn.Conv2d(
            channels * per_group_in, channels * HEAD_HIDDEN, 1, groups=channels
        )
        self.param_head = nn.Conv2d(
            channels * HEAD_HIDDEN, channels * 3 * k, 1, groups=channels
        )
        self.prob_head = nn.Conv2d(channels * HEAD_HIDDEN, channels, 1, groups=channels)

    def forward(self, y_hat: torch.Tensor, hyper_feat: torch.Tensor) -> ContextParams:
        b, c, h, w = y_hat.shape
        if c != self.channels:
            raise GeometryError(f"expected {self.channels} latent channels, got {c}")
        ctx = self.masked(y_hat).reshape(b, c, CTX_FEATURES, h, w)
        hyp = self.hyper_proj(hyper_feat).reshape(b, c, HYPER_FEATURES, h, w)
        mixed = torch.cat([ctx, hyp], dim=2).reshape(b, c * (CTX_FEATURES + HYPER_FEATURES), h, w)
        t = F.leaky_relu(self.trunk(mixed), 0.1)
        raw = self.param_head(t).reshape(b, c, 3 * self.k, h, w)
        logits = raw[:, :, : self.k]
        means = raw[:, :, self.k : 2 * self.k]
        scales = F.softplus(raw[:, :, 2 * self.k :]) + SCALE_FLOOR
        weights = torch.softmax(logits, dim=2)
        p_plus = torch.sigmoid(self.prob_head(t.detach())).clamp(PROB_EPS, 1.0 - PROB_EPS)
        mu = (weights * means).sum(dim=2)
        var = (weights * (scales * scales + means * means)).sum(dim=2) - mu * mu
        sigma = torch.sqrt(var.clamp_min(1e-12))
        return ContextParams(weights, means, scales, p_plus, mu, sigma)


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x * (2**-0.5))


def mixture_bin_mass(
    y: torch.Tensor,
    weights: torch.Tensor,
    means: torch.Tensor,
    scales: torch.Tensor,
) -> torch.Tensor:
    """Mass of the unit-width bin centered at y under the Gaussian mixture."""
    v = -(y.unsqueeze(2) - means).abs()
    upper = _std_normal_cdf((v + 0.5) / scales)
    lower = _std_normal_cdf((v - 0.5) / scales)
    mass = (weights * (upper - lower)).sum(dim=2)
    return mass.clamp_min(LIKELIHOOD_FLOOR)


def estimate_rate(latents: torch.Tensor, params: ContextParams, mode: str = "train") -> torch.Tensor:
    """Total bits to code the latent grid.

    train: differentiable surrogate, -log2 of the unit-bin mixture mass at
           the (noise-relaxed) latent values.
    bits:  the sign-bit cost the coder will actually pay, from p_plus and
           the quantizer decision against the mixture mean.
    """
    if mode == "train":
        mass = mixture_bin_mass(latents, params.weights, params.means, params.scales)
        return -torch.log2(mass).sum()
    if mode == "bits":
        plus = latents >= params.mu
        p = torch.where(plus, params.p_plus, 1.0 - params.p_plus)
        return -torch.log2(p).sum()
    raise NumericError(f"unknown rate mode {mode!r}")


def sign_bce_bits(latents: torch.Tensor, params: ContextParams) -> torch.Tensor:
    """Cross-entropy (in bits) of the sign-bit head against the quantizer
    decisions; this is the real code length of the sign stream."""
    target = (latents >= params.mu).detach()
    p = torch.where(target, params.p_plus, 1.0 - params.p_plus)
    return -torch.log2(p).sum()


class _ScanPack:
    """Numpy mirror of ContextModel's grouped heads for sequential coding."""

    def __init__(self, context: ContextModel, hyper_feat: torch.Tensor):
        c = context.channels
        self.channels = c
        self.k = context.k
        with torch.no_grad():
            wm = (context.masked.weight * context.masked.mask).detach().cpu().numpy()
            self.wm = np.ascontiguousarray(
                wm.reshape(c, CTX_FEATURES, -1).astype(np.float32)
            )
            self.bm = context.masked.bias.detach().cpu().numpy().astype(np.float64).reshape(c, CTX_FEATURES)
            tw = context.trunk.weight.detach().cpu().numpy().astype(np.float64)
            self.trunk_w = tw.reshape(c, HEAD_HIDDEN, CTX_FEATURES + HYPER_FEATURES)
            self.trunk_b = context.trunk.bias.detach().cpu().numpy().astype(np.float64).reshape(c, HEAD_HIDDEN)
            pw = context.param_head.weight.detach().cpu().numpy().astype(np.float64)
            self.par_w = pw.reshape(c, 3 * self.k, HEAD_HIDDEN)
            self.par_b = context.param_head.bias.detach().cpu().numpy().astype(np.float64).reshape(c, 3 * self.k)
            qw = context.prob_head.weight.detach().cpu().numpy().astype(np.float64)
            self.prob_w = qw.reshape(c, HEAD_HIDDEN)
            self.prob_b = context.prob_head.bias.detach().cpu().numpy().astype(np.float64).reshape(c)
            if hyper_feat.dim() != 4 or hyper_feat.shape[0] != 1:
                raise GeometryError("scan expects (1, C, h, w) hyper features")
            hyp = context.hyper_proj(hyper_feat).detach().cpu().numpy().astype(np.float64)
        h, w = hyp.shape[2], hyp.shape[3]
        self.grid = (h, w)
        self.hyper = hyp.reshape(c, HYPER_FEATURES, h, w)

    def params_at(self, canvas: np.ndarray, c: int, i: int, j: int):
        """(mu, sigma, p_plus) for sample (c, i, j) given the padded canvas."""
        k = self.k
        patch = canvas[:, i : i + 5, j : j + 5].reshape(-1)
        feats = self.wm[c] @ patch
        x = np.concatenate([feats.astype(np.float64) + self.bm[c], self.hyper[c, :, i, j]])
        t = self.trunk_w[c] @ x + self.trunk_b[c]
        t = np.where(t > 0, t, 0.1 * t)
        out = self.par_w[c] @ t + self.par_b[c]
        logits = out[:k]
        means = out[k : 2 * k]
        raw = out[2 * k :]
        e = np.exp(logits - logits.max())
        weights = e / e.sum()
        scales = np.where(raw > 20.0, raw, np.log1p(np.exp(np.minimum(raw, 20.0)))) + SCALE_FLOOR
        mu = float(weights @ means)
        var = float(weights @ (scales * scales + means * means)) - mu * mu
        sigma = math.sqrt(var if var > 1e-12 else 1e-12)
        pl = float(self.prob_w[c] @ t + self.prob_b[c])
        if pl >= 0:
            p = 1.0 / (1.0 + math.exp(-pl))
        else:
            ex = math.exp(pl)
            p = ex / (1.0 + ex)
        if p < PROB_EPS:
            p = PROB_EPS
        elif p > 1.0 - PROB_EPS:
            p = 1.0 - PROB_EPS
        return mu, sigma, p


class SequentialScan:
    """Shared encoder/decoder reference path over one latent grid."""

    def __init__(self, context: ContextModel, hyper_feat: torch.Tensor):
        self.pack = _ScanPack(context, hyper_feat)

    @property
    def grid(self) -> Tuple[int, int]:
        return self.pack.grid

    def symbol_count(self) -> int:
        h, w = self.pack.grid
        return self.pack.channels * h * w

    def _empty_canvas(self) -> np.ndarray:
        h, w = self.pack.grid
        return np.zeros((self.pack.channels, h + 4, w + 4), dtype=np.float32)

    def encode(self, latents: np.ndarray, encoder: RangeEncoder) -> Tuple[np.ndarray, float]:
        """Quantize and entropy-code the grid.

        Returns (dequantized grid the decoder will reproduce, model bits)."""
        pack = self.pack
        h, w = pack.grid
        if latents.shape != (pack.channels, h, w):
            raise GeometryError(
                f"latents {latents.shape} do not match scan grid {(pack.channels, h, w)}"
            )
        canvas = self._empty_canvas()
        params_at = pack.params_at
        encode_q = encoder.encode_quantized
        bits = 0.0
        for c in range(pack.channels):
            plane = latents[c]
            for i in range(h):
                row = plane[i]
                for j in range(w):
                    mu, sigma, p = params_at(canvas, c, i, j)
                    p16 = quantize_probability(p)
                    if row[j] >= mu:
                        encode_q(1, p16)
                        bits -= math.log2(p16 / 65536.0)
                        canvas[c, i + 2, j + 2] = np.float32(mu + sigma)
                    else:
                        encode_q(-1, p16)
                        bits -= math.log2(1.0 - p16 / 65536.0)
                        canvas[c, i + 2, j + 2] = np.float32(mu - sigma)
        return canvas[:, 2 : 2 + h, 2 : 2 + w].copy(), bits

    def decode(self, decoder: RangeDecoder) -> np.ndarray:
        pack = self.pack
        h, w = pack.grid
        canvas = self._empty_canvas()
        params_at = pack.params_at
        decode_q = decoder.decode_quantized
        for c in range(pack.channels):
            for i in range(h):
                for j in range(w):
                    mu, sigma, p = params_at(canvas, c, i, j)
                    if decode_q(quantize_probability(p)) == 1:
                        canvas[c, i + 2, j + 2] = np.float32(mu + sigma)
                    else:
                        canvas[c, i + 2, j + 2] = np.float32(mu - sigma)
        return canvas[:, 2 : 2 + h, 2 : 2 + w].copy()


def context_params(
    context: ContextModel,
    y_hat: np.ndarray,
    hyper_feat: torch.Tensor,
    k: int,
) -> Tuple[float, float, float]:
    """Reference-path (mu, sigma, p_plus) for flat coding-order position k.

    y_hat is the full (C, h, w) dequantized grid; entries at or after k may
    hold anything, the causal mask guarantees they are never read.
    """
    scan = SequentialScan(context, hyper_feat)
    c_total, (h, w) = scan.pack.channels, scan.pack.grid
    if y_hat.shape != (c_total, h, w):
        raise GeometryError(f"grid {y_hat.shape} does not match scan {(c_total, h, w)}")
    if not 0 <= k < c_total * h * w:
        raise GeometryError(f"position {k} outside grid of {c_total * h * w} samples")
    canvas = scan._empty_canvas()
    canvas[:, 2 : 2 + h, 2 : 2 + w] = y_hat.astype(np.float32)
    c, rem = divmod(k, h * w)
    i, j = divmod(rem, w)
    return scan.pack.params_at(canvas, c, i, j)


def hyper_symbol_count(grid: Tuple[int, int], channels: int = LATENT_CHANNELS) -> int:
    return channels * grid[0] * grid[1] * HYPER_PARTITION_BITS


def encode_hyper(
    values: np.ndarray, cdf_table: np.ndarray, encoder: RangeEncoder
) -> float:
    """Code integer hyper-latents as 8 binary partition decisions per value
    against the per-channel prior CDF table.  Returns model bits."""
    c, h, w = values.shape
    if values.size and (values.min() < -HYPER_BOUND or values.max() > HYPER_BOUND - 1):
        raise NumericError("hyper values outside the coded integer range")
    encode_q = encoder.encode_quantized
    bits = 0.0
    for ci in range(c):
        table = cdf_table[ci]
        flat = values[ci].reshape(-1)
        for v in flat.tolist():
            lo, hi = -HYPER_BOUND, HYPER_BOUND - 1
            for _ in range(HYPER_PARTITION_BITS):
                mid = (lo + hi + 1) >> 1
                total = table[hi + HYPER_BOUND + 1] - table[lo + HYPER_BOUND]
                right = table[hi + HYPER_BOUND + 1] - table[mid + HYPER_BOUND]
                p = right / total if total > 0 else 0.5
                if p < PROB_EPS:
                    p = PROB_EPS
                elif p > 1.0 - PROB_EPS:
                    p = 1.0 - PROB_EPS
                p16 = quantize_probability(p)
                if v >= mid:
                    encode_q(1, p16)
                    bits -= math.log2(p16 / 65536.0)
                    lo = mid
                else:
                    encode_q(-1, p16)
                    bits -= math.log2(1.0 - p16 / 65536.0)
                    hi = mid - 1
    return bits


def decode_hyper(
    grid: Tuple[int, int], cdf_table: np.ndarray, decoder: RangeDecoder,
    channels: int = LATENT_CHANNELS,
) -> np.ndarray:
    h, w = grid
    out = np.empty((channels, h, w), dtype=np.int32)
    decode_q = decoder.decode_quantized
    for ci in range(channels):
        table = cdf_table[ci]
        flat = out[ci].reshape(-1)
        for idx in range(h * w):
            lo, hi = -HYPER_BOUND, HYPER_BOUND - 1
            for _ in range(HYPER_PARTITION_BITS):
                mid = (lo + hi + 1) >> 1
                total = table[hi + HYPER_BOUND + 1] - table[lo + HYPER_BOUND]
                right = table[hi + HYPER_BOUND + 1] - table[mid + HYPER_BOUND]
                p = right / total if total > 0 else 0.5
                if p < PROB_EPS:
                    p = PROB_EPS
                elif p > 1.0 - PROB_EPS:
                    p = 1.0 - PROB_EPS
                if decode_q(quantize_probability(p)) == 1:
                    lo = mid
                else:
                    hi = mid - 1
            flat[idx] = lo
    return out


class TrainForwardOut(NamedTuple):
    x_hat: torch.Tensor
    rate_main_bits: torch.Tensor
    rate_hyper_bits: torch.Tensor
    sign_bits: torch.Tensor
    latents: torch.Tensor
    mask: torch.Tensor


class PlaneCompressor(nn.Module):
    """End-to-end compressor for one signal kind."""

    def __init__(self, kind: str, width: int = LATENT_CHANNELS, use_attention: bool = True):
        super().__init__()
        if kind not in SIGNAL_KINDS:
            raise NumericError(f"unknown signal kind {kind!r}")
        spec = SIGNAL_KINDS[kind]
        self.kind = kind
        self.width = width
        self.use_attention = use_attention
        bottleneck = 2 * width if use_attention else width
        self.analysis = AnalysisTransform(spec["channels"], width, bottleneck)
        self.attention = AttentionReduce(bottleneck, width) if use_attention else None
        self.synthesis = SynthesisTransform(width, spec["channels"], spec["low"], spec["high"])
        self.hyper_encoder = HyperEncoder(width)
        self.hyper_decoder = HyperDecoder(width)
        self.prior = FactorizedLogisticPrior(width)
        self.context = ContextModel(width)

    def latents(self, x: torch.Tensor, mask_override: torch.Tensor | None = None):
        expected = SIGNAL_KINDS[self.kind]["channels"]
        if x.dim() != 4 or int(x.shape[1]) != expected:
            raise GeometryError(
                f"{self.kind} compressor expects (B, {expected}, H, W), got {tuple(x.shape)}"
            )
        f = self.analysis(x)
        if self.attention is not None:
            return self.attention(f, mask_override)
        return f, torch.ones_like(f)

    def train_forward(self, x: torch.Tensor) -> TrainForwardOut:
        """Differentiable pass with additive-uniform-noise relaxation."""
        y, mask = self.latents(x)
        z = self.hyper_encoder(y)
        z_noisy = z + (torch.rand_like(z) - 0.5)
        hyper_feat = self.hyper_decoder(z_noisy, (int(y.shape[2]), int(y.shape[3])))
        y_noisy = y + (torch.rand_like(y) - 0.5)
        params = self.context(y_noisy, hyper_feat)
        rate_main = estimate_rate(y_noisy, params, "train")
        rate_hyper = self.prior.rate_bits(z_noisy)
        sign_bits = sign_bce_bits(y_noisy, params)
        x_hat = self.synthesis(y_noisy, (int(x.shape[2]), int(x.shape[3])))
        return TrainForwardOut(x_hat, rate_main, rate_hyper, sign_bits, y, mask)

    # Coding path (deterministic, eval mode, batch size 1).

    def encode_plane(self, x: torch.Tensor, encoder: RangeEncoder):
        """Quantize and code one padded plane into an open range encoder.

        Returns (z_int, y_hat, estimated_bits): the integer hyper grid, the
        dequantized latents, and the model-bit estimate for this stream.
        """
        if x.dim() != 4 or x.shape[0] != 1:
            raise GeometryError("coding path expects a (1, C, H, W) plane")
        with torch.no_grad():
            y, _ = self.latents(x)
            z = self.hyper_encoder(y)
            z_int = torch.round(z).clamp(-HYPER_BOUND, HYPER_BOUND - 1).to(torch.int32)
            hyper_feat = self.hyper_decoder(
                z_int.float(), (int(y.shape[2]), int(y.shape[3]))
            )
        z_np = z_int[0].cpu().numpy()
        table = self.prior.cdf_table()
        hyper_bits = encode_hyper(z_np, table, encoder)
        scan = SequentialScan(self.context, hyper_feat)
        y_np = y[0].cpu().numpy().astype(np.float32)
        y_hat, scan_bits = scan.encode(y_np, encoder)
        return z_np, y_hat, hyper_bits + scan_bits

    def decode_plane(self, grid: Tuple[int, int], decoder: RangeDecoder) -> np.ndarray:
        """Mirror of encode_plane; returns the dequantized latent grid."""
        hyper_grid = (math.ceil(grid[0] / 4), math.ceil(grid[1] / 4))
        table = self.prior.cdf_table()
        z_np = decode_hyper(hyper_grid, table, decoder, self.width)
        with torch.no_grad():
            z = torch.from_numpy(z_np).float().unsqueeze(0)
            hyper_feat = self.hyper_decoder(z, grid)
        scan = SequentialScan(self.context, hyper_feat)
        return scan.decode(decoder)

    def reconstruct(self, y_hat: np.ndarray, out_size: Tuple[int, int]) -> torch.Tensor:
        with torch.no_grad():
            lat = torch.from_numpy(y_hat).float().unsqueeze(0)
            return self.synthesis(lat, out_size)

    def plane_symbol_count(self, grid: Tuple[int, int]) -> int:
        hyper_grid = (math.ceil(grid[0] / 4), math.ceil(grid[1] / 4))
        return self.width * grid[0] * grid[1] + hyper_symbol_count(hyper_grid, self.width)
