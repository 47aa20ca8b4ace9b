"""Identity-aware enhancement stage.

High-res supervision frames are pushed through a differentiable JPEG +
bilinear /4 degradation, re-lipsynced at low resolution elsewhere, and
upsampled 4x here by two style-modulated conv blocks whose style vector
comes from an identity encoder.  The upsampler is residual around plain
bilinear upsampling, so an untrained model already matches that baseline.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BadQuality, BadShape
from .layers import ConvBlock, ResDown, StyledConv, ToRGB, g_loss, d_loss, perceptual_loss
from .providers import RestorationProvider

HR = 384
LR = 96
ID_DIM = 512

# ---------------------------------------------------------------------------
# differentiable JPEG

_YCBCR = torch.tensor([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])

_LUMA_TABLE = torch.tensor([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=torch.float32)

_CHROMA_TABLE = torch.tensor([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=torch.float32)


def _dct_basis() -> torch.Tensor:
    k = np.arange(8)[:, None]
    n = np.arange(8)[None, :]
    basis = np.cos(np.pi * (2 * n + 1) * k / 16.0)
    basis[0] *= np.sqrt(1.0 / 8.0)
    basis[1:] *= np.sqrt(2.0 / 8.0)
    return torch.from_numpy(basis.astype(np.float32))

_DCT = _dct_basis()


def _scaled_table(table: torch.Tensor, quality: int) -> torch.Tensor:
    """IJG quality scaling: 5000/q below 50, else 200-2q; clipped to [1,255]."""
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return torch.clamp(torch.floor((table * s + 50.0) / 100.0), 1.0, 255.0)


def soft_round(x: torch.Tensor) -> torch.Tensor:
    """round(x) + (x - round(x))^3: integer-valued-ish but smooth in autograd."""
    r = torch.round(x)
    return r + (x - r) ** 3


@dataclass
class DegradationConfig:
    jpeg_quality: int = 75
    down_factor: int = 4
    interpolation: str = "bilinear"


def _blockify(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // 8, 8, w // 8, 8)
    return x.permute(0, 1, 2, 4, 3, 5).reshape(b, c, -1, 8, 8)


def _unblockify(blocks: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, c = blocks.shape[:2]
    x = blocks.reshape(b, c, h // 8, w // 8, 8, 8)
    return x.permute(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def jpeg_compress(x: torch.Tensor, quality: int) -> torch.Tensor:
    """Differentiable JPEG round trip on (B,3,H,W) images in [0,1].

    BT.601 color transform, 8x8 orthonormal DCT, quality-scaled quantization
    with cubic soft rounding, no chroma subsampling.
    """
    if not 10 <= int(quality) <= 100:
        raise BadQuality(f"jpeg quality must be in [10, 100], got {quality}")
    b, c, h, w = x.shape
    if c != 3 or h % 8 or w % 8:
        raise BadShape(f"expected (B,3,8k,8k) input, got {tuple(x.shape)}")
    mat = _YCBCR.to(x.dtype)
    ycc = torch.einsum("ij,bjhw->bihw", mat, x * 255.0)
    ycc = ycc - torch.tensor([128.0, 0.0, 0.0], dtype=x.dtype).view(1, 3, 1, 1)
    blocks = _blockify(ycc)
    dct = _DCT.to(x.dtype)
    coef = dct @ blocks @ dct.T
    tables = torch.stack([
        _scaled_table(_LUMA_TABLE, int(quality)),
        _scaled_table(_CHROMA_TABLE, int(quality)),
        _scaled_table(_CHROMA_TABLE, int(quality)),
    ]).to(x.dtype).view(1, 3, 1, 8, 8)
    coef = soft_round(coef / tables) * tables
    blocks = dct.T @ coef @ dct
    ycc = _unblockify(blocks, h, w)
    ycc = ycc + torch.tensor([128.0, 0.0, 0.0], dtype=x.dtype).view(1, 3, 1, 1)
    rgb = torch.einsum("ij,bjhw->bihw", torch.inverse(mat).to(x.dtype), ycc) / 255.0
    return torch.clamp(rgb, 0.0, 1.0)


def degrade(frame: torch.Tensor, cfg: DegradationConfig | None = None) -> torch.Tensor:
    """JPEG round trip then bilinear downsample by cfg.down_factor."""
    cfg = cfg or DegradationConfig()
    compressed = jpeg_compress(frame, cfg.jpeg_quality)
    return F.interpolate(compressed, scale_factor=1.0 / cfg.down_factor,
                         mode=cfg.interpolation, align_corners=False,
                         recompute_scale_factor=False)


# ---------------------------------------------------------------------------
# identity encoder + upsampler


@dataclass
class ENetConfig:
    id_channels: tuple = (32, 64, 128, 192, 256, 256)
    up_channels: tuple[int, int] = (48, 24)
    id_dim: int = ID_DIM


class IdentityEncoder(nn.Module):
    """384 crop -> resize 256 -> six residual downsampling stages -> 512."""

    def __init__(self, cfg: ENetConfig | None = None):
        super().__init__()
        cfg = cfg or ENetConfig()
        chans = cfg.id_channels
        stages = []
        c_in = 3
        for c in chans:
            stages.append(ResDown(c_in, c))
            c_in = c
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(chans[-1], cfg.id_dim)

    def forward(self, ref: torch.Tensor) -> torch.Tensor:
        if ref.dim() != 4 or ref.shape[1] != 3 or ref.shape[2] != HR or ref.shape[3] != HR:
            raise BadShape(f"expected (B,3,{HR},{HR}) reference, got {tuple(ref.shape)}")
        h = F.interpolate(ref, size=256, mode="bilinear", align_corners=False)
        h = self.stages(h)
        return self.head(F.adaptive_avg_pool2d(h, 1).flatten(1))


class ENet(nn.Module):
    """Two style-modulated x2 blocks on top of a bilinear x4 base."""

    def __init__(self, cfg: ENetConfig | None = None):
        super().__init__()
        self.cfg = cfg or ENetConfig()
        c1, c2 = self.cfg.up_channels
        d = self.cfg.id_dim
        self.stem = nn.Conv2d(3, c1, 3, padding=1)
        self.style1 = StyledConv(c1, c1, d, upsample=True)
        self.rgb1 = ToRGB(c1, d)
        self.style2 = StyledConv(c1, c2, d, upsample=True)
        self.rgb2 = ToRGB(c2, d)
        for rgb in (self.rgb1, self.rgb2):
            nn.init.zeros_(rgb.conv.weight)  # fresh model reproduces the bilinear base

    def enhance(self, low: torch.Tensor, id_vec: torch.Tensor) -> torch.Tensor:
        if low.dim() != 4 or low.shape[1] != 3 or low.shape[2] != LR or low.shape[3] != LR:
            raise BadShape(f"expected (B,3,{LR},{LR}) input, got {tuple(low.shape)}")
        base = F.interpolate(low, scale_factor=4, mode="bilinear", align_corners=False)
        h = F.leaky_relu(self.stem(low), 0.2)
        h = self.style1(h, id_vec)
        rgb = self.rgb1(h, id_vec)
        h = self.style2(h, id_vec)
        rgb = self.rgb2(h, id_vec, skip=rgb)
        return torch.clamp(base + rgb, 0.0, 1.0)

    def forward(self, low: torch.Tensor, id_vec: torch.Tensor) -> torch.Tensor:
        return self.enhance(low, id_vec)


# ---------------------------------------------------------------------------
# objectives


def identity_loss(pred: torch.Tensor, target: torch.Tensor, provider) -> torch.Tensor:
    """Mean L2 distance between provider embeddings of target and prediction."""
    return (provider.embed(target) - provider.embed(pred)).norm(dim=1).mean()


@dataclass
class EnhanceBatch:
    """One E-Net training batch; o_lr must come from L-Net on degraded input."""

    i_gt: torch.Tensor  # (B,3,384,384) supervision
    id_ref: torch.Tensor  # (B,3,384,384) identity reference
    o_lr: torch.Tensor  # (B,3,96,96) low-res re-synthesis
    o_hr: torch.Tensor | None = None  # filled by the generator pass
    source: str = "lnet-degraded"


def enet_objective(batch: EnhanceBatch, features, identity_provider,
                   discriminator, lambda_l1: float = 0.2, lambda_p: float = 1.0,
                   lambda_adv: float = 100.0, lambda_id: float = 0.4):
    """Generator and discriminator losses.

    Generator: lambda_l1*L1 + lambda_p*perceptual + lambda_adv*non-saturating
    adversarial + lambda_id*identity.  Discriminator: softplus real/fake on
    detached generator output.
    """
    if batch.o_hr is None:
        raise BadShape("batch.o_hr is unset; run the generator first")
    o_hr, i_gt = batch.o_hr, batch.i_gt
    l1 = (o_hr - i_gt).abs().mean()
    lp = perceptual_loss(features.features(o_hr), features.features(i_gt))
    lid = identity_loss(o_hr, i_gt, identity_provider)
    terms = {"l1": l1, "perceptual": lp, "identity": lid}
    if lambda_adv != 0.0:
        fake_logits = discriminator(o_hr)
        terms["adv"] = g_loss(fake_logits)
        disc_loss = d_loss(discriminator(i_gt), discriminator(o_hr.detach()))
    else:
        terms["adv"] = torch.zeros((), dtype=o_hr.dtype)
        disc_loss = d_loss(discriminator(i_gt), discriminator(o_hr.detach()))
    total = (lambda_l1 * l1 + lambda_p * lp + lambda_adv * terms["adv"]
             + lambda_id * lid)
    terms["total"] = total
    return terms, disc_loss


def build_enhanced_dataset(crops: np.ndarray, restoration: RestorationProvider):
    """Upscale a low-res crop set to 384 and record a reproducible manifest."""
    out = []
    manifest = {"provider": restoration.provider_id, "samples": []}
    for i, crop in enumerate(np.asarray(crops)):
        restored = restoration.restore(crop)
        if restored.shape[0] != HR:
            restored = cv2.resize(restored, (HR, HR), interpolation=cv2.INTER_CUBIC)
        out.append(restored)
        manifest["samples"].append({
            "id": i,
            "provider": restoration.provider_id,
            "sha256": hashlib.sha256(np.ascontiguousarray(restored).tobytes()).hexdigest(),
        })
    manifest["hash"] = hashlib.sha256(
        json.dumps(manifest["samples"], sort_keys=True).encode()).hexdigest()
    frames = np.stack(out) if out else np.zeros((0, HR, HR, 3), np.uint8)
    return frames, manifest
