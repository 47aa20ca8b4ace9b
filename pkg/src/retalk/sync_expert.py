"""Audio-visual sync expert.

A two-tower embedder: five stacked lower-half mouth crops (48x96) on one
side, a 0.2 s mel window (80x16) on the other, both mapped to unit-norm
512-vectors.  Sync probability is the clamped cosine between the towers;
the scan-based LSE-D / LSE-C metrics live here too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BadShape, ClipTooShort, ZeroVector
from .media_io import MelSpectrogram, mel_window

EMBED_DIM = 512
SYNC_EPS = 1e-7
WINDOW_FRAMES = 5
MAX_OFFSET = 15


def _tower(channels: list[int], strides: list, c_in: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for c_out, s in zip(channels, strides):
        layers += [nn.Conv2d(c_in, c_out, 3, stride=s, padding=1),
                   nn.BatchNorm2d(c_out), nn.ReLU(inplace=True)]
        c_in = c_out
    return nn.Sequential(*layers)


class SyncNet(nn.Module):
    """Two-tower sync embedder with unit-norm outputs."""

    def __init__(self, base: int = 32, embed_dim: int = EMBED_DIM):
        super().__init__()
        b = base
        self.video_tower = _tower([b, b * 2, b * 3, b * 4, b * 6],
                                  [1, 2, 2, 2, 2], c_in=3 * WINDOW_FRAMES)
        self.video_head = nn.Linear(b * 6, embed_dim)
        self.audio_tower = _tower([b, b * 2, b * 3, b * 4, b * 6],
                                  [1, (2, 1), 2, 2, 2], c_in=1)
        self.audio_head = nn.Linear(b * 6, embed_dim)

    def embed_video(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, 15, 48, 96) five stacked lower-half RGB crops -> (B, 512)."""
        if windows.dim() != 4 or windows.shape[1] != 3 * WINDOW_FRAMES:
            raise BadShape(f"expected (B,{3 * WINDOW_FRAMES},48,96), got {tuple(windows.shape)}")
        h = self.video_tower(windows)
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return F.normalize(self.video_head(h), dim=1, eps=1e-8)

    def embed_audio(self, mels: torch.Tensor) -> torch.Tensor:
        """(B, 1, 80, 16) log-mel windows -> (B, 512)."""
        if mels.dim() != 4 or mels.shape[1] != 1 or mels.shape[2] != 80:
            raise BadShape(f"expected (B,1,80,16), got {tuple(mels.shape)}")
        h = self.audio_tower(mels)
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return F.normalize(self.audio_head(h), dim=1, eps=1e-8)

    def forward(self, windows: torch.Tensor, mels: torch.Tensor):
        return self.embed_video(windows), self.embed_audio(mels)


def sync_probability(v: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """p = clamp(cos(v, a), eps, 1), batched over the leading dimension.

    The cosine is evaluated through the unit-vector chord length,
    1 - |v_hat - a_hat|^2 / 2, which is well conditioned near 1: coinciding
    embeddings give p = 1 bit-for-bit instead of 1 - ulp.
    """
    if v.dim() == 1:
        v = v.unsqueeze(0)
    if a.dim() == 1:
        a = a.unsqueeze(0)
    vn = v.norm(dim=1)
    an = a.norm(dim=1)
    if bool(((vn < 1e-12) & (an < 1e-12)).any()):
        raise ZeroVector("both embeddings are numerically zero")
    vhat = v / torch.clamp(vn, min=1e-12).unsqueeze(1)
    ahat = a / torch.clamp(an, min=1e-12).unsqueeze(1)
    cos = 1.0 - 0.5 * (vhat - ahat).pow(2).sum(dim=1)
    cos = torch.where(torch.minimum(vn, an) < 1e-12, torch.zeros_like(cos), cos)
    return torch.clamp(cos, min=SYNC_EPS, max=1.0)


def sync_loss(v: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Mean -log p over the batch; zero iff every pair is perfectly aligned."""
    return (-torch.log(sync_probability(v, a))).mean()


def video_window(crops: np.ndarray, start: int) -> np.ndarray:
    """Stack frames [start, start+5) lower halves into (15, 48, 96) floats."""
    t, h, w = crops.shape[:3]
    if start < 0 or start + WINDOW_FRAMES > t:
        raise BadShape(f"window [{start}, {start + WINDOW_FRAMES}) outside clip of {t}")
    window = crops[start : start + WINDOW_FRAMES, h // 2 :, :, :]
    window = window.astype(np.float32) / 255.0 if window.dtype == np.uint8 else window.astype(np.float32)
    return window.transpose(0, 3, 1, 2).reshape(3 * WINDOW_FRAMES, h // 2, w)


@dataclass
class LseReport:
    lse_d: float
    lse_c: float
    windows: int
    offset_curve: np.ndarray  # mean distance per offset, offsets -15..15


def lse_metrics(crops: np.ndarray, mel: MelSpectrogram, model: SyncNet,
                fps: float = 25.0, stride: int = 1,
                max_offset: int = MAX_OFFSET) -> LseReport:
    """Offset-scan lip-sync metrics on aligned 96x96 mouth crops.

    For every window position the Euclidean distance between the video
    embedding and audio embeddings at offsets -max_offset..max_offset is
    computed; LSE-D averages the aligned (offset 0) distance and LSE-C
    averages (median - min) of each position's distance curve.
    """
    t = len(crops)
    if t < WINDOW_FRAMES + 2 * max_offset:
        raise ClipTooShort(
            f"need >= {WINDOW_FRAMES + 2 * max_offset} frames for a +/-{max_offset} scan, got {t}")
    positions = list(range(max_offset, t - WINDOW_FRAMES - max_offset + 1, stride))
    audio_index = list(range(0, t - WINDOW_FRAMES + 1))

    model.eval()
    with torch.no_grad():
        vwin = torch.from_numpy(np.stack([video_window(crops, p) for p in positions]))
        v = model.embed_video(vwin).numpy()
        awin = torch.from_numpy(np.stack(
            [mel_window(mel, i, fps).values[None] for i in audio_index]))
        a = model.embed_audio(awin).numpy()

    offsets = np.arange(-max_offset, max_offset + 1)
    dists = np.empty((len(positions), len(offsets)))
    for row, p in enumerate(positions):
        idx = p + offsets
        dists[row] = np.linalg.norm(v[row][None, :] - a[idx], axis=1)
    lse_d = float(dists[:, max_offset].mean())
    lse_c = float((np.median(dists, axis=1) - dists.min(axis=1)).mean())
    return LseReport(lse_d=lse_d, lse_c=lse_c, windows=len(positions),
                     offset_curve=dists.mean(axis=0))
