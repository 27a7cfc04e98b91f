"""Motion estimation and compensation.

The estimator runs on a 1/8-scale copy of the luma plane: a three-level
feature pyramid feeds coarse-to-fine correlation (cost-volume) flow heads,
the coarsest full result is cleaned by a local-attention residual refiner,
and learned upsampling blocks conditioned on the warped error lift the flow
back to full resolution one octave at a time.  The returned pyramid holds
one flow per octave, finest last, each in pixel units of its own grid.

Warping is backward bilinear with border clamp, implemented by hand so that
zero flow reproduces the input bit for bit and gradients flow to the field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import GeometryError

CORRELATION_RADIUS = 4
DEFAULT_LEVELS = 4


def warp(plane: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp (B, C, H, W) by a (B, 2, H, W) flow (x then y channel).

    Samples plane at (x + flow_x, y + flow_y) with bilinear weights and
    border-clamped indices.
    """
    if plane.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise GeometryError(
            f"warp expects (B,C,H,W) plane and (B,2,H,W) flow, got {tuple(plane.shape)} and {tuple(flow.shape)}"
        )
    if plane.shape[2:] != flow.shape[2:] or plane.shape[0] != flow.shape[0]:
        raise GeometryError(
            f"plane {tuple(plane.shape)} and flow {tuple(flow.shape)} geometry mismatch"
        )
    b, c, h, w = plane.shape
    xs = torch.arange(w, dtype=plane.dtype, device=plane.device).view(1, 1, 1, w)
    ys = torch.arange(h, dtype=plane.dtype, device=plane.device).view(1, 1, h, 1)
    gx = xs + flow[:, 0:1]
    gy = ys + flow[:, 1:2]
    x0f = torch.floor(gx)
    y0f = torch.floor(gy)
    fx = gx - x0f
    fy = gy - y0f
    x0 = x0f.long().clamp(0, w - 1)
    x1 = (x0f.long() + 1).clamp(0, w - 1)
    y0 = y0f.long().clamp(0, h - 1)
    y1 = (y0f.long() + 1).clamp(0, h - 1)
    flat = plane.reshape(b, c, h * w)

    def gather(iy, ix):
        idx = (iy * w + ix).reshape(b, 1, h * w).expand(b, c, h * w)
        return torch.gather(flat, 2, idx).reshape(b, c, h, w)

    p00 = gather(y0, x0)
    p01 = gather(y0, x1)
    p10 = gather(y1, x0)
    p11 = gather(y1, x1)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    return p00 * w00 + p01 * w01 + p10 * w10 + p11 * w11


def correlation(fa: torch.Tensor, fb: torch.Tensor, radius: int = CORRELATION_RADIUS) -> torch.Tensor:
    """Local cost volume: mean-over-channel dot products of fa with fb shifted
    by every displacement within the radius.  Returns (B, (2r+1)^2, H, W).

    fb is replicate-padded so border channels compare against real feature
    vectors instead of being suppressed toward zero."""
    if fa.shape != fb.shape:
        raise GeometryError(f"correlation inputs differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    b, c, h, w = fa.shape
    padded = F.pad(fb, (radius,) * 4, mode="replicate")
    rows = []
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            shifted = padded[:, :, dy : dy + h, dx : dx + w]
            rows.append((fa * shifted).mean(dim=1))
    return torch.stack(rows, dim=1)


def _conv(cin: int, cout: int, k: int = 3, s: int = 1) -> nn.Conv2d:
    # replicate padding keeps border features comparable to interior ones;
    # zero padding would imprint a frame-edge pattern onto every channel
    return nn.Conv2d(cin, cout, k, stride=s, padding=k // 2, padding_mode="replicate")


def _zero_conv(cin: int, cout: int, k: int = 3) -> nn.Conv2d:
    conv = _conv(cin, cout, k)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


def _patch_conv(cin: int, cout: int, s: int = 1) -> nn.Conv2d:
    """Conv whose first nine output channels start as the 3x3 patch taps of
    input channel zero (shifted delta kernels) and the rest as small zero-mean
    random kernels.

    With these weights the per-position feature vector is the local patch
    itself, so the cosine cost volume starts out as plain normalized patch
    correlation: exactly 1 at a true match and decaying with distance, with
    no spurious ties.  The matcher is therefore usable before any training,
    and gradient descent only has to refine it."""
    conv = _conv(cin, cout, 3, s)
    with torch.no_grad():
        conv.weight.mul_(0.1)
        conv.weight.sub_(conv.weight.mean(dim=(1, 2, 3), keepdim=True))
        for i in range(min(9, cout)):
            conv.weight[i, 0].zero_()
            conv.weight[i, 0, i // 3, i % 3] = 1.0
        nn.init.zeros_(conv.bias)
    return conv


def _identity_conv(cin: int, cout: int) -> nn.Conv2d:
    """Conv initialized to pass its input channels through (dirac weights
    plus a little symmetry-breaking noise)."""
    conv = _conv(cin, cout, 3)
    with torch.no_grad():
        nn.init.dirac_(conv.weight)
        conv.weight.add_(torch.randn_like(conv.weight) * 0.01)
        nn.init.zeros_(conv.bias)
    return conv


class WindowAttention(nn.Module):
    """Single-head self-attention within non-overlapping spatial windows."""

    def __init__(self, channels: int, window: int = 7):
        super().__init__()
        self.window = window
        self.scale = channels**-0.5
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        win = self.window
        ph = (-h) % win
        pw = (-w) % win
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        hp, wp = x.shape[2], x.shape[3]
        qkv = self.qkv(x).reshape(b, 3, c, hp // win, win, wp // win, win)
        qkv = qkv.permute(1, 0, 3, 5, 4, 6, 2)
        qkv = qkv.reshape(3, -1, win * win, c)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = attn @ v
        out = out.reshape(b, hp // win, wp // win, win, win, c)
        out = out.permute(0, 5, 1, 3, 2, 4).reshape(b, c, hp, wp)
        if ph or pw:
            out = out[:, :, :h, :w]
        return self.proj(out)


class LARB(nn.Module):
    """Residual conv block followed by residual local window attention."""

    def __init__(self, channels: int, window: int = 7):
        super().__init__()
        self.body = nn.Sequential(
            _conv(channels, channels),
            nn.LeakyReLU(0.1, inplace=True),
            _conv(channels, channels),
        )
        self.attn = WindowAttention(channels, window)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.body(x)
        return x + self.attn(x)


class FlowRefiner(nn.Module):
    """LARB stack applied to a 2-channel flow field.

    The correction branch ends in a zero-initialized conv, so an untrained
    refiner is exactly the identity.
    """

    def __init__(self, channels: int = 32, blocks: int = 2, window: int = 7):
        super().__init__()
        self.head = _conv(2, channels)
        self.blocks = nn.Sequential(*[LARB(channels, window) for _ in range(blocks)])
        self.tail = _zero_conv(channels, 2)

    def forward(self, flow: torch.Tensor) -> torch.Tensor:
        return flow + self.tail(self.blocks(self.head(flow)))


def refine_motion(refiner: FlowRefiner, flow: torch.Tensor) -> torch.Tensor:
    """Apply a LARB flow refiner to a (B, 2, H, W) field."""
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise GeometryError(f"flow must be (B,2,H,W), got {tuple(flow.shape)}")
    return refiner(flow)


@dataclass
class FlowPyramid:
    """Per-octave flows, coarsest first; each in its own grid's pixel units."""

    levels: List[torch.Tensor]

    def __post_init__(self):
        if not self.levels:
            raise GeometryError("flow pyramid needs at least one level")
        for lv in self.levels:
            if lv.dim() != 4 or lv.shape[1] != 2:
                raise GeometryError(f"pyramid level must be (B,2,H,W), got {tuple(lv.shape)}")

    @property
    def finest(self) -> torch.Tensor:
        return self.levels[-1]

    def sizes(self) -> List[Tuple[int, int]]:
        return [(int(lv.shape[2]), int(lv.shape[3])) for lv in self.levels]


def _level_sizes(height: int, width: int, levels: int) -> List[Tuple[int, int]]:
    return [
        (math.ceil(height / 2**k), math.ceil(width / 2**k))
        for k in range(levels - 1, -1, -1)
    ]


def _resize_flow(flow: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    h0, w0 = flow.shape[2], flow.shape[3]
    out = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    sx = size[1] / w0
    sy = size[0] / h0
    return torch.cat([out[:, 0:1] * sx, out[:, 1:2] * sy], dim=1)


class _SoftArgmax(nn.Module):
    """Cost-volume readout: softmax over the correlation channels with a
    learnable temperature, then average the displacement grid.  A flat volume
    gives uniform weights and therefore exactly zero flow, so uninformative
    matches never invent motion."""

    def __init__(self, radius: int, temperature: float = 12.0, prior: float = 4.0):
        super().__init__()
        self.radius = radius
        self.temperature = nn.Parameter(torch.tensor(float(temperature)))
        # zero-motion prior: cosine ties (flat or repetitive content) resolve
        # toward no displacement instead of splitting mass across the grid
        self.prior = nn.Parameter(torch.tensor(float(prior)))
        span = torch.arange(-radius, radius + 1, dtype=torch.float32)
        dy, dx = torch.meshgrid(span, span, indexing="ij")
        # channel order matches correlation(): dy outer loop, dx inner
        self.register_buffer(
            "offsets", torch.stack([dx.reshape(-1), dy.reshape(-1)])
        )
        self.register_buffer(
            "distance", (dx.reshape(-1) ** 2 + dy.reshape(-1) ** 2).sqrt() / radius
        )

    def forward(self, corr: torch.Tensor) -> torch.Tensor:
        logits = corr * self.temperature - self.prior * self.distance.view(1, -1, 1, 1)
        weights = torch.softmax(logits, dim=1)
        flow_x = (weights * self.offsets[0].view(1, -1, 1, 1)).sum(dim=1, keepdim=True)
        flow_y = (weights * self.offsets[1].view(1, -1, 1, 1)).sum(dim=1, keepdim=True)
        return torch.cat([flow_x, flow_y], dim=1)


class _FlowHead(nn.Module):
    """Residual corrector on top of the soft-argmax estimate; the zero-init
    tail keeps the initial flow equal to the plain cost-volume readout."""

    def __init__(self, cin: int):
        super().__init__()
        self.net = nn.Sequential(
            _conv(cin, 48),
            nn.LeakyReLU(0.1, inplace=True),
            _conv(48, 32),
            nn.LeakyReLU(0.1, inplace=True),
            _zero_conv(32, 2),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class _UpsampleBlock(nn.Module):
    """One learned x2 flow upsampling step conditioned on the warped error."""

    def __init__(self, channels: int = 16):
        super().__init__()
        self.lift = nn.ConvTranspose2d(2, channels, 3, stride=2, padding=1)
        self.mix = nn.Sequential(
            _conv(channels + 2 + 2, 24),
            nn.LeakyReLU(0.1, inplace=True),
        )
        self.out = _zero_conv(24, 2)

    def forward(
        self,
        coarse: torch.Tensor,
        ref_level: torch.Tensor,
        target_level: torch.Tensor,
    ) -> torch.Tensor:
        size = (ref_level.shape[2], ref_level.shape[3])
        base = _resize_flow(coarse, size)
        err = target_level - warp(ref_level, base)
        feat = F.leaky_relu(self.lift(coarse, output_size=size), 0.1)
        x = torch.cat([feat, base, err, ref_level], dim=1)
        return base + self.out(self.mix(x))


class MotionEstimator(nn.Module):
    """Coarse-to-fine flow estimator with learned hierarchical upsampling.

    levels counts the pyramid octaves (default 4: the correlation network
    runs at 1/8 scale and three learned steps lift the flow to full size).
    """

    def __init__(
        self,
        levels: int = DEFAULT_LEVELS,
        radius: int = CORRELATION_RADIUS,
        max_flow: float = 64.0,
    ):
        super().__init__()
        if levels < 1:
            raise GeometryError(f"levels must be >= 1, got {levels}")
        self.levels = levels
        self.radius = radius
        self.max_flow = float(max_flow)
        self.pool_factor = 2 ** (levels - 1)
        ch = (16, 24, 32)
        self.feat0 = nn.Sequential(
            _patch_conv(1, ch[0]), nn.LeakyReLU(0.1, inplace=True), _identity_conv(ch[0], ch[0])
        )
        self.feat1 = nn.Sequential(
            _patch_conv(ch[0], ch[1], s=2), nn.LeakyReLU(0.1, inplace=True), _identity_conv(ch[1], ch[1])
        )
        self.feat2 = nn.Sequential(
            _patch_conv(ch[1], ch[2], s=2), nn.LeakyReLU(0.1, inplace=True), _identity_conv(ch[2], ch[2])
        )
        area = (2 * radius + 1) ** 2
        self.argmax2 = _SoftArgmax(radius)
        self.argmax1 = _SoftArgmax(radius)
        self.argmax0 = _SoftArgmax(radius)
        self.head2 = _FlowHead(area + ch[2])
        self.head1 = _FlowHead(area + ch[1] + 2)
        self.head0 = _FlowHead(area + ch[0] + 2)
        self.refiner = FlowRefiner(channels=32, blocks=2)
        self.upsamplers = nn.ModuleList(
            [_UpsampleBlock() for _ in range(levels - 1)]
        )

    def _features(self, plane: torch.Tensor):
        f0 = self.feat0(plane)
        f1 = self.feat1(F.leaky_relu(f0, 0.1))
        f2 = self.feat2(F.leaky_relu(f1, 0.1))
        return f0, f1, f2

    def _coarse_flow(self, ref_small: torch.Tensor, tgt_small: torch.Tensor) -> torch.Tensor:
        # cosine cost volumes over spatially-centered features; the sqrt(C)
        # factor cancels the channel mean inside correlation() so volume
        # values are true cosines in [-1, 1] regardless of feature width
        def unit(f: torch.Tensor) -> torch.Tensor:
            centered = f - f.mean(dim=(2, 3), keepdim=True)
            return F.normalize(centered, dim=1) * math.sqrt(f.shape[1])
        # every intermediate flow is clamped to the displacement budget of its
        # own grid: training cannot drift past the representable range, and
        # the vanishing clamp gradient stops runaway weight growth
        cap = self.max_flow / self.pool_factor
        r0, r1, r2 = self._features(ref_small)
        t0, t1, t2 = self._features(tgt_small)
        corr2 = correlation(unit(t2), unit(r2), self.radius)
        flow2 = self.argmax2(corr2) + self.head2(torch.cat([corr2, t2], dim=1))
        flow2 = flow2.clamp(-cap / 4, cap / 4)
        up1 = _resize_flow(flow2, (r1.shape[2], r1.shape[3]))
        corr1 = correlation(unit(t1), unit(warp(r1, up1)), self.radius)
        flow1 = up1 + self.argmax1(corr1) + self.head1(torch.cat([corr1, t1, up1], dim=1))
        flow1 = flow1.clamp(-cap / 2, cap / 2)
        up0 = _resize_flow(flow1, (r0.shape[2], r0.shape[3]))
        corr0 = correlation(unit(t0), unit(warp(r0, up0)), self.radius)
        flow0 = up0 + self.argmax0(corr0) + self.head0(torch.cat([corr0, t0, up0], dim=1))
        return flow0.clamp(-cap, cap)

    def forward(self, ref_plane: torch.Tensor, target_plane: torch.Tensor) -> FlowPyramid:
        if ref_plane.shape != target_plane.shape:
            raise GeometryError(
                f"reference {tuple(ref_plane.shape)} and target {tuple(target_plane.shape)} differ"
            )
        if ref_plane.dim() != 4 or ref_plane.shape[1] != 1:
            raise GeometryError(f"expected (B,1,H,W) planes, got {tuple(ref_plane.shape)}")
        h, w = int(ref_plane.shape[2]), int(ref_plane.shape[3])
        sizes = _level_sizes(h, w, self.levels)
        ref_levels = [
            ref_plane if s == (h, w) else F.adaptive_avg_pool2d(ref_plane, s) for s in sizes
        ]
        tgt_levels = [
            target_plane if s == (h, w) else F.adaptive_avg_pool2d(target_plane, s)
            for s in sizes
        ]
        cap = self.max_flow / self.pool_factor
        flow = self._coarse_flow(ref_levels[0], tgt_levels[0])
        flow = self.refiner(flow).clamp(-cap, cap)
        levels = [flow]
        for i, block in enumerate(self.upsamplers):
            cap *= 2
            flow = block(flow, ref_levels[i + 1], tgt_levels[i + 1]).clamp(-cap, cap)
            levels.append(flow)
        return FlowPyramid(levels=levels)

    def estimate(self, ref_plane: torch.Tensor, target_plane: torch.Tensor) -> FlowPyramid:
        return self.forward(ref_plane, target_plane)


def me_loss(
    pyramid: FlowPyramid,
    ref_plane: torch.Tensor,
    target_plane: torch.Tensor,
) -> torch.Tensor:
    """Multi-level motion loss: the arithmetic mean over pyramid levels of the
    mean squared warped error, plus a small quadratic zero-motion penalty.

    The penalty mirrors the rate cost that coding a motion field incurs and
    keeps directions the warp error cannot see (flow drift on ambiguous
    content) from wandering during training."""
    if ref_plane.shape != target_plane.shape:
        raise GeometryError("reference and target shapes differ")
    terms = []
    magnitudes = []
    for flow in pyramid.levels:
        size = (int(flow.shape[2]), int(flow.shape[3]))
        if size == (int(ref_plane.shape[2]), int(ref_plane.shape[3])):
            ref_level, tgt_level = ref_plane, target_plane
        else:
            ref_level = F.adaptive_avg_pool2d(ref_plane, size)
            tgt_level = F.adaptive_avg_pool2d(target_plane, size)
        terms.append(F.mse_loss(warp(ref_level, flow), tgt_level))
        magnitudes.append((flow**2).mean())
    return torch.stack(terms).mean() + 1e-6 * torch.stack(magnitudes).mean()


def scale_flow_for_chroma(flow: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Resample a luma flow field onto the half-resolution chroma grid,
    halving the displacement magnitudes to match chroma pixel units."""
    return _resize_flow(flow, size)
