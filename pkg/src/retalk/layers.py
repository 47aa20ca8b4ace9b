"""Shared neural building blocks.

Everything here is written so the math-level contracts are directly testable:
the warp has an exact zero-offset identity, the Fourier unit is linear when
its activation is disabled and invertible when its 1x1 conv is the identity,
attention exposes its pre-residual convex combination, and AdaIN starts as a
plain re-normalization (scale 1, shift 0).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import OddChannels, ShapeMismatch


# ---------------------------------------------------------------------------
# warping


def bilinear_warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp x by per-pixel offsets, border-clamped.

    x: (B,C,H,W); flow: (B,2,H,W) with flow[:,0]=dx, flow[:,1]=dy in pixels.
    Output pixel (i,j) reads x at (j+dx, i+dy).  Implemented with explicit
    corner gathering rather than grid_sample so zero flow reproduces the
    input bit-for-float (no normalized-coordinate rounding).
    """
    if flow.shape[1] != 2 or flow.shape[0] != x.shape[0] or flow.shape[2:] != x.shape[2:]:
        raise ShapeMismatch(f"flow {tuple(flow.shape)} does not match input {tuple(x.shape)}")
    b, c, h, w = x.shape
    ii, jj = torch.meshgrid(
        torch.arange(h, device=x.device, dtype=x.dtype),
        torch.arange(w, device=x.device, dtype=x.dtype),
        indexing="ij",
    )
    gx = jj.unsqueeze(0) + flow[:, 0]
    gy = ii.unsqueeze(0) + flow[:, 1]
    x0 = torch.floor(gx)
    y0 = torch.floor(gy)
    wx = gx - x0
    wy = gy - y0

    x0i = x0.long().clamp(0, w - 1)
    x1i = (x0i + 1).clamp(max=w - 1)
    y0i = y0.long().clamp(0, h - 1)
    y1i = (y0i + 1).clamp(max=h - 1)

    flat = x.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return torch.gather(flat, 2, idx).reshape(b, c, h, w)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    return (
        (1 - wx) * (1 - wy) * gather(y0i, x0i)
        + wx * (1 - wy) * gather(y0i, x1i)
        + (1 - wx) * wy * gather(y1i, x0i)
        + wx * wy * gather(y1i, x1i)
    )


def upsample_flow(flow: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Resize a displacement map; offset values are kept in full-res pixels."""
    return F.interpolate(flow, scale_factor=factor, mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# normalization


def instance_stats(x: torch.Tensor, eps: float = 1e-8):
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return mu, torch.sqrt(var + eps)


class AdaIN(nn.Module):
    """Instance-normalize, then scale/shift with parameters from a vector.

    The affine head is zero-initialized with bias (1, 0), so a fresh block
    re-standardizes each channel: mean 0, std 1.
    """

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.channels = channels
        self.head = nn.Linear(cond_dim, channels * 2)
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias[:channels] = 1.0
            self.head.bias[channels:] = 0.0

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        mu, std = instance_stats(x)
        params = self.head(z)
        scale = params[:, : self.channels].unsqueeze(-1).unsqueeze(-1)
        shift = params[:, self.channels :].unsqueeze(-1).unsqueeze(-1)
        return scale * (x - mu) / std + shift


# ---------------------------------------------------------------------------
# conv blocks


class ConvBlock(nn.Module):
    """conv -> optional norm -> leaky relu, with optional spectral norm."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1,
                 norm: str = "none", spectral: bool = False, act: bool = True):
        super().__init__()
        conv = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2)
        if spectral:
            conv = nn.utils.spectral_norm(conv)
        self.conv = conv
        if norm == "bn":
            self.norm = nn.BatchNorm2d(c_out)
        elif norm == "in":
            self.norm = nn.InstanceNorm2d(c_out, affine=True)
        else:
            self.norm = nn.Identity()
        self.act = act

    def forward(self, x):
        h = self.norm(self.conv(x))
        return F.leaky_relu(h, 0.2) if self.act else h


class AdaConv(nn.Module):
    """conv (optionally spectral-normed) -> AdaIN(z) -> leaky relu."""

    def __init__(self, c_in: int, c_out: int, cond_dim: int, kernel: int = 3,
                 stride: int = 1, spectral: bool = False):
        super().__init__()
        conv = nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2)
        if spectral:
            conv = nn.utils.spectral_norm(conv)
        self.conv = conv
        self.adain = AdaIN(c_out, cond_dim)

    def forward(self, x, z):
        return F.leaky_relu(self.adain(self.conv(x), z), 0.2)


class ResBlock(nn.Module):
    def __init__(self, channels: int, norm: str = "in"):
        super().__init__()
        self.c1 = ConvBlock(channels, channels, norm=norm)
        self.c2 = ConvBlock(channels, channels, norm=norm, act=False)

    def forward(self, x):
        return F.leaky_relu(x + self.c2(self.c1(x)), 0.2)


class ResDown(nn.Module):
    """Residual downsampling stage (stride-2 main path, avg-pool skip)."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c1 = ConvBlock(c_in, c_out, stride=2, norm="in")
        self.c2 = ConvBlock(c_out, c_out, norm="in", act=False)
        self.skip = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        h = self.c2(self.c1(x))
        s = self.skip(F.avg_pool2d(x, 2))
        return F.leaky_relu(h + s, 0.2)


# ---------------------------------------------------------------------------
# Fourier / FFC


class FourierUnit(nn.Module):
    """Global spectral mixer: rFFT -> 1x1 conv on stacked re/im -> irFFT.

    With `norm_act=False` the unit is linear; additionally forcing the conv
    to the identity (`set_identity`) makes it an exact FFT round trip.
    """

    def __init__(self, channels: int, norm_act: bool = True):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(channels * 2, channels * 2, 1, bias=False)
        self.norm_act = norm_act
        self.norm = nn.InstanceNorm2d(channels * 2, affine=True) if norm_act else None

    def set_identity(self):
        with torch.no_grad():
            self.conv.weight.copy_(torch.eye(self.channels * 2).reshape(
                self.channels * 2, self.channels * 2, 1, 1))
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        spec = torch.fft.rfft2(x, dim=(-2, -1), norm="ortho")
        stacked = torch.cat([spec.real, spec.imag], dim=1)
        mixed = self.conv(stacked)
        if self.norm_act:
            mixed = F.leaky_relu(self.norm(mixed), 0.2)
        spec = torch.complex(mixed[:, :c], mixed[:, c:])
        out = torch.fft.irfft2(spec, s=(h, w), dim=(-2, -1), norm="ortho")
        return out.to(x.dtype)


class SpectralTransform(nn.Module):
    """Reduce -> FourierUnit -> expand, with a local residual inside."""

    def __init__(self, c_in: int, c_out: int, norm_act: bool = True):
        super().__init__()
        mid = max(c_out // 2, 1)
        self.reduce = nn.Conv2d(c_in, mid, 1, bias=False)
        self.fu = FourierUnit(mid, norm_act=norm_act)
        self.expand = nn.Conv2d(mid, c_out, 1, bias=False)

    def forward(self, x):
        h = F.leaky_relu(self.reduce(x), 0.2)
        return self.expand(h + self.fu(h))


class MRFFC(nn.Module):
    """Residual FFC block with audio-conditioned AdaIN.

    Channels split into a local (spatial conv) and a global (spectral) half;
    the four cross paths are summed per branch, activated, re-joined, passed
    through AdaIN driven by the conditioning vector, and added back to the
    input.  `pre_residual` exposes the block before the skip for tests.
    """

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        if channels % 2 != 0:
            raise OddChannels(f"channel count {channels} cannot split into two branches")
        half = channels // 2
        self.half = half
        self.l2l = nn.Conv2d(half, half, 3, padding=1)
        self.l2g = nn.Conv2d(half, half, 3, padding=1)
        self.g2l = nn.Conv2d(half, half, 3, padding=1)
        self.g2g = SpectralTransform(half, half)
        self.adain = AdaIN(channels, cond_dim)

    def pre_residual(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        xl, xg = x[:, : self.half], x[:, self.half :]
        yl = F.leaky_relu(self.l2l(xl) + self.g2l(xg), 0.2)
        yg = F.leaky_relu(self.l2g(xl) + self.g2g(xg), 0.2)
        return self.adain(torch.cat([yl, yg], dim=1), z)

    def forward(self, x, z):
        return x + self.pre_residual(x, z)


# ---------------------------------------------------------------------------
# attention


class CrossAttentionBlock(nn.Module):
    """Single-head attention: Q and K from x, V from ref, residual from x.

    `attend` returns the raw softmax(QK^T/sqrt(d))V map — a convex
    combination of value tokens — and `forward` adds the residual.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.q = nn.Conv2d(dim, dim, 1)
        self.k = nn.Conv2d(dim, dim, 1)
        self.v = nn.Conv2d(dim, dim, 1)

    def attend(self, x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        if x.shape != ref.shape:
            raise ShapeMismatch(f"query map {tuple(x.shape)} vs value map {tuple(ref.shape)}")
        b, c, h, w = x.shape
        q = self.q(x).flatten(2).transpose(1, 2)  # (B, N, C)
        k = self.k(x).flatten(2).transpose(1, 2)
        v = self.v(ref).flatten(2).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(1, 2) / self.dim ** 0.5, dim=-1)
        out = attn @ v
        return out.transpose(1, 2).reshape(b, c, h, w)

    def forward(self, x, ref):
        return x + self.attend(x, ref)


class CrossAttentionFuse(nn.Module):
    def __init__(self, dim: int, blocks: int = 2):
        super().__init__()
        self.blocks = nn.ModuleList(CrossAttentionBlock(dim) for _ in range(blocks))

    def forward(self, f_orig, f_ref):
        x = f_orig
        for blk in self.blocks:
            x = blk(x, f_ref)
        return x


# ---------------------------------------------------------------------------
# style-modulated convolution


class ModulatedConv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, style_dim: int,
                 demodulate: bool = True, upsample: bool = False):
        super().__init__()
        self.upsample = upsample
        self.demodulate = demodulate
        self.kernel = kernel
        self.weight = nn.Parameter(
            torch.randn(1, c_out, c_in, kernel, kernel) / (c_in * kernel * kernel) ** 0.5)
        self.affine = nn.Linear(style_dim, c_in)
        nn.init.zeros_(self.affine.weight)
        nn.init.ones_(self.affine.bias)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        b, c_in, h, w = x.shape
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            h, w = h * 2, w * 2
        s = self.affine(style).view(b, 1, c_in, 1, 1)
        weight = self.weight * s
        if self.demodulate:
            demod = torch.rsqrt(weight.pow(2).sum([2, 3, 4]) + 1e-8)
            weight = weight * demod.view(b, -1, 1, 1, 1)
        c_out = weight.shape[1]
        weight = weight.reshape(b * c_out, c_in, self.kernel, self.kernel)
        out = F.conv2d(x.reshape(1, b * c_in, h, w), weight,
                       padding=self.kernel // 2, groups=b)
        return out.reshape(b, c_out, h, w)


class StyledConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, style_dim: int, upsample: bool = False):
        super().__init__()
        self.conv = ModulatedConv2d(c_in, c_out, 3, style_dim, upsample=upsample)
        self.bias = nn.Parameter(torch.zeros(1, c_out, 1, 1))

    def forward(self, x, style):
        return F.leaky_relu(self.conv(x, style) + self.bias, 0.2)


class ToRGB(nn.Module):
    def __init__(self, c_in: int, style_dim: int):
        super().__init__()
        self.conv = ModulatedConv2d(c_in, 3, 1, style_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(1, 3, 1, 1))

    def forward(self, x, style, skip=None):
        out = self.conv(x, style) + self.bias
        if skip is not None:
            out = out + F.interpolate(skip, scale_factor=2, mode="bilinear", align_corners=False)
        return out


# ---------------------------------------------------------------------------
# discriminator + GAN losses


class PatchDiscriminator(nn.Module):
    """Patch-level real/fake classifier with spectral-normed convs."""

    def __init__(self, c_in: int = 3, base: int = 24, layers: int = 4):
        super().__init__()
        blocks = [ConvBlock(c_in, base, kernel=4, stride=2, spectral=True)]
        ch = base
        for _ in range(layers - 1):
            blocks.append(ConvBlock(ch, min(ch * 2, 192), kernel=4, stride=2, spectral=True))
            ch = min(ch * 2, 192)
        self.body = nn.Sequential(*blocks)
        self.head = nn.utils.spectral_norm(nn.Conv2d(ch, 1, 4, padding=2))

    def forward(self, x):
        return self.head(self.body(x))


def d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return (F.softplus(-real_logits) + F.softplus(fake_logits)).mean()


def g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective."""
    return F.softplus(-fake_logits).mean()


# ---------------------------------------------------------------------------
# feature-space losses


def gram_matrix(feat: torch.Tensor) -> torch.Tensor:
    """G[i][j] = sum_hw F[i]F[j] / (C*H*W), batched."""
    if feat.dim() == 3:
        feat = feat.unsqueeze(0)
    b, c, h, w = feat.shape
    flat = feat.reshape(b, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def perceptual_loss(feats_a: list[torch.Tensor], feats_b: list[torch.Tensor]) -> torch.Tensor:
    """Sum over levels of the mean per-sample L2 feature distance."""
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        total = total + (fa - fb).flatten(1).norm(dim=1).mean()
    return total


def style_loss(feats_a: list[torch.Tensor], feats_b: list[torch.Tensor]) -> torch.Tensor:
    """Sum over levels of the mean Frobenius distance between Gram matrices."""
    total = 0.0
    for fa, fb in zip(feats_a, feats_b):
        ga, gb = gram_matrix(fa), gram_matrix(fb)
        total = total + (ga - gb).flatten(1).norm(dim=1).mean()
    return total
