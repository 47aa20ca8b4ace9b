"""Expression-reenactment stage.

A temporal window of expression+pose coefficients is mapped to a motion
latent; a warping network predicts a quarter-resolution flow that re-poses
the source crop; an editing network refines the warped result.  Losses are
feature-space: an L2 perceptual term for the warp and perceptual+Gram style
terms for the edit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BadWindowLength, LengthMismatch
from .face_geometry import CoeffSequence, ExpressionTemplate, replace_expression
from .layers import AdaConv, bilinear_warp, perceptual_loss, style_loss, upsample_flow
from .media_io import VideoClip

COEFF_CHANNELS = 64 + 6  # expression + pose


@dataclass
class DNetConfig:
    base_channels: int = 64
    max_channels: int = 256
    latent_dim: int = 256
    window: int = 27
    crop_size: int = 256


class MappingNet(nn.Module):
    """Four 1-D convs over the coefficient window, pooled to a latent."""

    def __init__(self, cfg: DNetConfig):
        super().__init__()
        self.window = cfg.window
        c = max(cfg.latent_dim // 2, 64)
        self.convs = nn.ModuleList([
            nn.Conv1d(COEFF_CHANNELS, c, 3, padding=1),
            nn.Conv1d(c, c, 3, padding=1),
            nn.Conv1d(c, c, 3, padding=1),
            nn.Conv1d(c, c, 3, padding=1),
        ])
        self.head = nn.Linear(c, cfg.latent_dim)

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        if window.dim() != 3 or window.shape[1] != COEFF_CHANNELS or window.shape[2] != self.window:
            raise BadWindowLength(
                f"expected (B,{COEFF_CHANNELS},{self.window}) coefficient window, "
                f"got {tuple(window.shape)}")
        h = window
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        return self.head(h.mean(dim=2))


class WarpingNet(nn.Module):
    """5-down / 3-up hourglass emitting a quarter-resolution flow field.

    The flow head is zero-initialized, so an untrained network is an exact
    identity warp.  Encoder features at 1/2, 1/4 and 1/8 scale are returned
    for the editing network's skip connections.
    """

    def __init__(self, cfg: DNetConfig):
        super().__init__()
        b, cm, z = cfg.base_channels, cfg.max_channels, cfg.latent_dim
        ch = [min(b * 2 ** i, cm) for i in range(6)]
        self.stem = AdaConv(3, ch[0], z)
        self.down = nn.ModuleList(
            AdaConv(ch[i], ch[i + 1], z, stride=2) for i in range(5))
        self.up = nn.ModuleList([
            AdaConv(ch[5], ch[4], z),
            AdaConv(ch[4], ch[3], z),
            AdaConv(ch[3], ch[2], z),
        ])
        self.flow_head = nn.Conv2d(ch[2], 2, 3, padding=1)
        nn.init.zeros_(self.flow_head.weight)
        nn.init.zeros_(self.flow_head.bias)

    def forward(self, source: torch.Tensor, z: torch.Tensor):
        h = self.stem(source, z)
        feats = []
        for stage in self.down:
            h = stage(h, z)
            feats.append(h)
        for stage in self.up:
            h = stage(F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False), z)
        flow = self.flow_head(h)
        warped = apply_flow(source, flow)
        return flow, warped, feats[:3]


def apply_flow(source: torch.Tensor, flow_quarter: torch.Tensor) -> torch.Tensor:
    """Upsample a quarter-grid flow x4 (values in full-res pixels) and warp."""
    flow = upsample_flow(flow_quarter, factor=4)
    return bilinear_warp(source, flow)


class EditingNet(nn.Module):
    """Three-stage refiner over the warped image with encoder skip adds."""

    def __init__(self, cfg: DNetConfig):
        super().__init__()
        b, cm, z = cfg.base_channels, cfg.max_channels, cfg.latent_dim
        ch = [min(b * 2 ** i, cm) for i in range(6)]
        self.down = nn.ModuleList([
            AdaConv(3, ch[1], z, stride=2, spectral=True),
            AdaConv(ch[1], ch[2], z, stride=2, spectral=True),
            AdaConv(ch[2], ch[3], z, stride=2, spectral=True),
        ])
        self.up = nn.ModuleList([
            AdaConv(ch[3], ch[2], z, spectral=True),
            AdaConv(ch[2], ch[1], z, spectral=True),
            AdaConv(ch[1], ch[0], z, spectral=True),
        ])
        self.head = nn.Conv2d(ch[0], 3, 3, padding=1)

    def forward(self, warped: torch.Tensor, skips: list[torch.Tensor],
                z: torch.Tensor) -> torch.Tensor:
        h = warped
        for stage, skip in zip(self.down, skips):
            h = stage(h, z) + skip
        for stage in self.up:
            h = stage(F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False), z)
        return torch.sigmoid(self.head(h))


@dataclass
class DNetOutput:
    warped: torch.Tensor  # (B,3,S,S) in [0,1]
    edited: torch.Tensor  # (B,3,S,S) in [0,1]
    flow: torch.Tensor  # (B,2,S/4,S/4), offsets in full-res pixels


class DNet(nn.Module):
    def __init__(self, cfg: DNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or DNetConfig()
        self.mapping = MappingNet(self.cfg)
        self.warping = WarpingNet(self.cfg)
        self.editing = EditingNet(self.cfg)

    def forward(self, source: torch.Tensor, window: torch.Tensor) -> DNetOutput:
        z = self.mapping(window)
        flow, warped, skips = self.warping(source, z)
        edited = self.editing(warped, skips, z)
        return DNetOutput(warped=warped, edited=edited, flow=flow)


def dnet_loss(out: DNetOutput, target: torch.Tensor, features,
              lambda_c: float = 1.0, lambda_s: float = 250.0) -> dict[str, torch.Tensor]:
    """Warp loss and edit loss on provider features.

    l_dw = sum_l ||f_l(target) - f_l(warped)||_2;
    l_de = lambda_c * perceptual(edited) + lambda_s * Gram-style(edited).
    """
    f_target = features.features(target)
    f_warped = features.features(out.warped)
    f_edited = features.features(out.edited)
    l_dw = perceptual_loss(f_target, f_warped)
    content = perceptual_loss(f_target, f_edited)
    style = style_loss(f_target, f_edited)
    l_de = lambda_c * content + lambda_s * style
    return {"l_dw": l_dw, "l_de": l_de, "content": content, "style": style}


def coeff_window(coeffs: CoeffSequence, center: int, length: int = 27) -> np.ndarray:
    """(70, length) slice centered on a frame, edge-clamped."""
    t = len(coeffs)
    idx = np.clip(np.arange(center - length // 2, center - length // 2 + length), 0, t - 1)
    stacked = np.concatenate([coeffs.expression[idx], coeffs.pose[idx]], axis=1)
    return stacked.T.astype(np.float32)


def reenact_video(model: DNet, clip: VideoClip, coeffs: CoeffSequence,
                  template: ExpressionTemplate | None = None,
                  mode: str = "video_to_video") -> VideoClip:
    """Re-render aligned crops under driven coefficients.

    one_shot warps frame 0 for every output frame; video_to_video (default)
    warps each frame with its own driven window.  The index of the source
    frame used per output frame is logged in the output clip's meta.
    """
    if len(coeffs) != len(clip.frames):
        raise LengthMismatch(
            f"{len(coeffs)} coefficient frames vs {len(clip.frames)} video frames")
    if mode not in ("one_shot", "video_to_video"):
        raise ValueError(f"unknown mode {mode!r}")
    driven = replace_expression(coeffs, template) if template is not None else coeffs
    t = len(clip.frames)
    frames = clip.frames.astype(np.float32) / 255.0
    out_frames = np.empty_like(clip.frames)
    reference_indices = []
    model.eval()
    with torch.no_grad():
        for i in range(t):
            src_idx = 0 if mode == "one_shot" else i
            reference_indices.append(src_idx)
            source = torch.from_numpy(frames[src_idx].transpose(2, 0, 1)).unsqueeze(0)
            window = torch.from_numpy(
                coeff_window(driven, i, model.cfg.window)).unsqueeze(0)
            out = model(source, window)
            img = out.edited[0].permute(1, 2, 0).clamp(0, 1).numpy()
            out_frames[i] = np.rint(img * 255.0).astype(np.uint8)
    meta = dict(clip.meta)
    meta.update({"mode": mode, "reference_indices": reference_indices})
    return VideoClip(frames=out_frames, fps=clip.fps, meta=meta)
