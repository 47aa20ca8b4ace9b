"""Audio-conditioned lower-face inpainting.

Two visual encoders (masked-target-plus-pose stream, reference stream) meet
in a cross-attention fusion at 256x12x12; a decoder of residual FFC blocks,
each modulated by the 256-d audio vector through AdaIN, paints the lower
half back in.  The target's lower half is zeroed before the network ever
sees it, so lip shape can only come from audio and references.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BadShape
from .layers import ConvBlock, CrossAttentionFuse, MRFFC, ResBlock, perceptual_loss
from .sync_expert import SyncNet, sync_loss

CROP = 96
FUSION_DIM = 256
AUDIO_DIM = 256
T_FRAMES = 5


def mask_lower_half(frame):
    """Zero rows [H/2, H); accepts HxWx3 arrays or (...,C,H,W) tensors."""
    if isinstance(frame, np.ndarray):
        if frame.ndim != 3 or frame.shape[0] != CROP or frame.shape[1] != CROP:
            raise BadShape(f"expected ({CROP},{CROP},3) frame, got {frame.shape}")
        out = frame.copy()
        out[CROP // 2 :] = 0
        return out
    if frame.shape[-2] != CROP or frame.shape[-1] != CROP:
        raise BadShape(f"expected trailing ({CROP},{CROP}) dims, got {tuple(frame.shape)}")
    out = frame.clone()
    out[..., CROP // 2 :, :] = 0
    return out


@dataclass
class LNetConfig:
    enc_channels: tuple[int, int] = (32, 64)
    dec_channels: tuple[int, int, int] = (64, 32, 24)
    ffc_blocks_per_stage: int = 9
    fusion_dim: int = FUSION_DIM
    audio_dim: int = AUDIO_DIM
    attention_blocks: int = 2


@dataclass
class LNetInput:
    """Batched five-frame windows; masked_orig carries [masked | pose-ref]."""

    masked_orig: torch.Tensor  # (B, 5, 6, 96, 96)
    reference: torch.Tensor  # (B, 5, 3, 96, 96)
    mel: torch.Tensor  # (B, 5, 1, 80, 16)

    @classmethod
    def build(cls, target: torch.Tensor, pose_ref: torch.Tensor,
              reference: torch.Tensor, mel: torch.Tensor) -> "LNetInput":
        """Mask the targets and pair them channel-wise with pose references."""
        for name, x, ch in (("target", target, 3), ("pose_ref", pose_ref, 3),
                            ("reference", reference, 3)):
            if x.dim() != 5 or x.shape[1] != T_FRAMES or x.shape[2] != ch \
                    or x.shape[3] != CROP or x.shape[4] != CROP:
                raise BadShape(f"{name}: expected (B,{T_FRAMES},{ch},{CROP},{CROP}), "
                               f"got {tuple(x.shape)}")
        if mel.dim() != 5 or mel.shape[1] != T_FRAMES or mel.shape[2] != 1 \
                or mel.shape[3] != 80 or mel.shape[4] != 16:
            raise BadShape(f"mel: expected (B,{T_FRAMES},1,80,16), got {tuple(mel.shape)}")
        masked = mask_lower_half(target)
        return cls(masked_orig=torch.cat([masked, pose_ref], dim=2),
                   reference=reference, mel=mel)


class AudioEncoder(nn.Module):
    """Small residual conv net: 80x16 log-mel window -> 256 vector."""

    def __init__(self, out_dim: int = AUDIO_DIM):
        super().__init__()
        self.stem = ConvBlock(1, 32, norm="bn")
        self.blocks = nn.Sequential(
            ConvBlock(32, 64, stride=2, norm="bn"), ResBlock(64, norm="bn"),
            ConvBlock(64, 128, stride=2, norm="bn"), ResBlock(128, norm="bn"),
            ConvBlock(128, 256, stride=2, norm="bn"),
        )
        self.head = nn.Linear(256, out_dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.dim() != 4 or mel.shape[1] != 1 or mel.shape[2] != 80 or mel.shape[3] != 16:
            raise BadShape(f"expected (B,1,80,16) mel window, got {tuple(mel.shape)}")
        h = self.blocks(self.stem(mel))
        return self.head(F.adaptive_avg_pool2d(h, 1).flatten(1))


class VisualEncoder(nn.Module):
    """Three conv-BN-LeakyReLU downsampling stages: 96 -> 12, channels -> 256."""

    def __init__(self, c_in: int, channels: tuple[int, int], fusion_dim: int):
        super().__init__()
        c1, c2 = channels
        self.s1 = ConvBlock(c_in, c1, stride=2, norm="bn")
        self.s2 = ConvBlock(c1, c2, stride=2, norm="bn")
        self.s3 = ConvBlock(c2, fusion_dim, stride=2, norm="bn")

    def forward(self, x: torch.Tensor):
        f1 = self.s1(x)
        f2 = self.s2(f1)
        f3 = self.s3(f2)
        return f1, f2, f3


class DecoderStage(nn.Module):
    """Upsample, project, add skip if present, then run the FFC blocks."""

    def __init__(self, c_in: int, c_out: int, audio_dim: int, n_blocks: int):
        super().__init__()
        self.proj = nn.Conv2d(c_in, c_out, 1)
        self.blocks = nn.ModuleList(MRFFC(c_out, audio_dim) for _ in range(n_blocks))

    def forward(self, x: torch.Tensor, audio: torch.Tensor,
                skip: torch.Tensor | None = None) -> torch.Tensor:
        h = self.proj(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
        if skip is not None:
            h = h + skip
        for blk in self.blocks:
            h = blk(h, audio)
        return h


class LNet(nn.Module):
    def __init__(self, cfg: LNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or LNetConfig()
        c = self.cfg
        self.audio_encoder = AudioEncoder(c.audio_dim)
        self.enc_orig = VisualEncoder(6, c.enc_channels, c.fusion_dim)
        self.enc_ref = VisualEncoder(3, c.enc_channels, c.fusion_dim)
        self.fuse = CrossAttentionFuse(c.fusion_dim, blocks=c.attention_blocks)
        d1, d2, d3 = c.dec_channels
        n = c.ffc_blocks_per_stage
        self.dec1 = DecoderStage(c.fusion_dim, d1, c.audio_dim, n)
        self.skip1 = nn.Conv2d(c.enc_channels[1], d1, 1)
        self.dec2 = DecoderStage(d1, d2, c.audio_dim, n)
        self.skip2 = nn.Conv2d(c.enc_channels[0], d2, 1)
        self.dec3 = DecoderStage(d2, d3, c.audio_dim, n)
        self.head = nn.Conv2d(d3, 3, 3, padding=1)

    def encode_audio(self, mel: torch.Tensor) -> torch.Tensor:
        return self.audio_encoder(mel)

    def forward(self, inp: LNetInput) -> torch.Tensor:
        b = inp.masked_orig.shape[0]
        x = inp.masked_orig.reshape(b * T_FRAMES, 6, CROP, CROP)
        r = inp.reference.reshape(b * T_FRAMES, 3, CROP, CROP)
        m = inp.mel.reshape(b * T_FRAMES, 1, 80, 16)
        audio = self.audio_encoder(m)
        s1, s2, f_orig = self.enc_orig(x)
        _, _, f_ref = self.enc_ref(r)
        h = self.fuse(f_orig, f_ref)
        h = self.dec1(h, audio, skip=self.skip1(s2))
        h = self.dec2(h, audio, skip=self.skip2(s1))
        h = self.dec3(h, audio)
        out = torch.sigmoid(self.head(h))
        return out.reshape(b, T_FRAMES, 3, CROP, CROP)


def lnet_loss(pred: torch.Tensor, target: torch.Tensor, mel: torch.Tensor,
              features, sync: SyncNet | None,
              lambda_l1: float = 1.0, lambda_p: float = 1.0,
              lambda_sync: float = 0.3) -> dict[str, torch.Tensor]:
    """lambda_1 * L1 + lambda_p * perceptual + lambda_sync * mean(-log P_sync).

    The sync term embeds the predicted five-frame window against the mel
    window of its first frame (the 80x16 window spans exactly those 0.2 s).
    """
    if pred.shape != target.shape:
        raise BadShape(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    b = pred.shape[0]
    l1 = (pred - target).abs().mean()
    f_pred = features.features(pred.reshape(-1, 3, CROP, CROP))
    f_tgt = features.features(target.reshape(-1, 3, CROP, CROP))
    lp = perceptual_loss(f_pred, f_tgt)
    terms = {"l1": l1, "perceptual": lp}
    total = lambda_l1 * l1 + lambda_p * lp
    if sync is not None and lambda_sync != 0.0:
        lower = pred[:, :, :, CROP // 2 :, :].reshape(b, 3 * T_FRAMES, CROP // 2, CROP)
        v = sync.embed_video(lower)
        a = sync.embed_audio(mel[:, 0])
        ls = sync_loss(v, a)
        terms["sync"] = ls
        total = total + lambda_sync * ls
    terms["total"] = total
    return terms
