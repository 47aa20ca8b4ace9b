"""Pluggable external-model interfaces with deterministic test defaults.

Heavy pretrained networks (perceptual feature extractors, identity embedders,
face restoration, landmark/coefficient estimators, face parsers) sit behind
small protocols so the rest of the code never imports them directly.  The
defaults here are seed-deterministic stand-ins: a frozen random convolutional
pyramid for features, a random-projection embedder for identity, bicubic
resampling for restoration, and geometry-based detectors for the toy avatar.
Real models are drop-in replacements satisfying the same protocols.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ProviderFailure
from .face_geometry import CoeffSequence, LandmarkTrack, MOUTH_IDX
from .media_io import VideoClip
from . import toydata

EMBED_DIM = 64
ID_EMBED_DIM = 128


# ---------------------------------------------------------------------------
# protocols


@runtime_checkable
class FeatureProvider(Protocol):
    provider_id: str

    def features(self, x: torch.Tensor) -> list[torch.Tensor]: ...

    def embed(self, x: torch.Tensor) -> torch.Tensor: ...


@runtime_checkable
class IdentityEmbeddingProvider(Protocol):
    provider_id: str

    def embed(self, x: torch.Tensor) -> torch.Tensor: ...


@runtime_checkable
class RestorationProvider(Protocol):
    provider_id: str
    scale: int

    def restore(self, img: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class LandmarkProvider(Protocol):
    provider_id: str

    def track(self, clip: VideoClip) -> LandmarkTrack: ...


@runtime_checkable
class CoefficientProvider(Protocol):
    provider_id: str

    def coefficients(self, clip: VideoClip) -> CoeffSequence: ...


@runtime_checkable
class ParserProvider(Protocol):
    provider_id: str

    def parse(self, frame: np.ndarray,
              landmarks: np.ndarray | None = None) -> tuple[np.ndarray, tuple[int, int, int, int]]: ...


# ---------------------------------------------------------------------------
# feature pyramid (perceptual-loss / FID embedding stand-in)


class FeaturePyramid(nn.Module):
    """Frozen 4-level random conv pyramid.

    features() returns one map per level for perceptual/style losses;
    embed() pools the deepest level through a fixed projection for FID.
    All weights are drawn from a seeded generator, so two instances built
    with the same seed are bit-identical.
    """

    provider_id = "feature-pyramid"

    def __init__(self, seed: int = 0, channels=(16, 32, 64, 128), embed_dim: int = EMBED_DIM):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        c_in = 3
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            fan = c_in * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan) ** 0.5)
                conv.bias.zero_()
            convs.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(convs)
        proj = torch.randn(channels[-1], embed_dim, generator=gen) / channels[-1] ** 0.5
        self.register_buffer("proj", proj)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ProviderFailure(f"expected (B,3,H,W) input, got {tuple(x.shape)}")
        h = x * 2.0 - 1.0
        out = []
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            out.append(h)
        return out

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        deep = self.features(x)[-1]
        pooled = deep.mean(dim=(2, 3))
        return pooled @ self.proj

    def embed_frames(self, frames: np.ndarray, batch: int = 32) -> np.ndarray:
        """uint8 (N,H,W,3) -> float64 (N, embed_dim), for metric code."""
        outs = []
        with torch.no_grad():
            for i in range(0, len(frames), batch):
                x = torch.from_numpy(frames[i : i + batch].astype(np.float32) / 255.0)
                outs.append(self.embed(x.permute(0, 3, 1, 2)).numpy())
        return np.concatenate(outs, axis=0).astype(np.float64)


class RandomProjectionIdentity(nn.Module):
    """Identity-embedding stand-in: pooled pixels through a fixed projection."""

    provider_id = "random-projection-identity"

    def __init__(self, seed: int = 1, embed_dim: int = ID_EMBED_DIM, pool: int = 32):
        super().__init__()
        self.pool = pool
        gen = torch.Generator().manual_seed(seed)
        w = torch.randn(embed_dim, 3 * pool * pool, generator=gen) / (3 * pool * pool) ** 0.5
        self.register_buffer("weight", w)
        self.eval()

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ProviderFailure(f"expected (B,3,H,W) input, got {tuple(x.shape)}")
        h = F.adaptive_avg_pool2d(x, self.pool).flatten(1)
        e = F.linear(h, self.weight)
        return F.normalize(e, dim=1, eps=1e-8)


# ---------------------------------------------------------------------------
# restoration


class BicubicUpscale:
    """x4 bicubic upscale; stands in for a pretrained restoration network."""

    def __init__(self, scale: int = 4):
        self.scale = int(scale)
        self.provider_id = f"bicubic-x{self.scale}"

    def restore(self, img: np.ndarray) -> np.ndarray:
        h, w = img.shape[:2]
        return cv2.resize(img, (w * self.scale, h * self.scale), interpolation=cv2.INTER_CUBIC)


class IdentityRestoration:
    provider_id = "identity"
    scale = 1

    def restore(self, img: np.ndarray) -> np.ndarray:
        return img.copy()


class SharpenRestoration:
    """Unsharp-mask stub used to verify region-local enhancement plumbing."""

    provider_id = "sharpen"
    scale = 1

    def __init__(self, amount: float = 1.5):
        self.amount = amount

    def restore(self, img: np.ndarray) -> np.ndarray:
        blur = cv2.GaussianBlur(img, (0, 0), 1.5)
        out = img.astype(np.float64) * (1 + self.amount) - blur.astype(np.float64) * self.amount
        return np.clip(out, 0, 255).astype(img.dtype)


# ---------------------------------------------------------------------------
# toy-avatar detectors


def detect_face_center(frame: np.ndarray) -> np.ndarray:
    """Centroid of non-background pixels; exact for the symmetric toy avatar."""
    border = np.concatenate([frame[0], frame[-1], frame[:, 0], frame[:, -1]], axis=0)
    bg = np.median(border.reshape(-1, 3), axis=0)
    dist = np.abs(frame.astype(np.float64) - bg[None, None, :]).sum(axis=2)
    mask = dist > 60.0
    if not mask.any():
        raise ProviderFailure("no face-like region found")
    ys, xs = np.nonzero(mask)
    return np.array([xs.mean(), ys.mean()])


class ToyLandmarkProvider:
    """Landmarks for toy-avatar frames via center/aperture detection.

    Eye and nose anchor offsets are fixed fractions of the frame, so the
    anchors used for alignment are exact once the face centroid is found.
    """

    provider_id = "toy-landmarks"

    def __init__(self, identity: dict | None = None):
        self.identity = identity or {
            "face_radius": toydata.FACE_RADIUS,
            "mouth_half_w": toydata.MOUTH_HALF_W,
        }

    def track(self, clip: VideoClip) -> LandmarkTrack:
        size = clip.frames.shape[1]
        centers = np.stack([detect_face_center(f) for f in clip.frames])
        aperture = np.clip(
            [toydata.measure_aperture(f, c, size) for f, c in zip(clip.frames, centers)], 0.0, 1.0
        )
        return toydata.toy_landmarks(self.identity, size, centers, np.asarray(aperture))


class ToyCoefficientProvider:
    """Expression/pose coefficients recovered from toy-avatar pixels."""

    provider_id = "toy-coefficients"

    def coefficients(self, clip: VideoClip) -> CoeffSequence:
        size = clip.frames.shape[1]
        centers = np.stack([detect_face_center(f) for f in clip.frames])
        aperture = np.clip(
            [toydata.measure_aperture(f, c, size) for f, c in zip(clip.frames, centers)], 0.0, 1.0
        )
        return toydata.toy_coefficients(np.asarray(aperture), centers, size)


class GroundTruthLandmarkProvider:
    provider_id = "toy-ground-truth-landmarks"

    def __init__(self, sample: toydata.ToySample):
        self.sample = sample

    def track(self, clip: VideoClip) -> LandmarkTrack:
        return toydata.sample_landmarks(self.sample)


class GroundTruthCoefficientProvider:
    provider_id = "toy-ground-truth-coefficients"

    def __init__(self, sample: toydata.ToySample):
        self.sample = sample

    def coefficients(self, clip: VideoClip) -> CoeffSequence:
        return toydata.sample_coefficients(self.sample)


# ---------------------------------------------------------------------------
# parsing


class GeometryParser:
    """Landmark-driven face parser stand-in.

    Emits a soft lower-half ellipse mask plus a mouth teeth box (the landmark
    mouth bounding box inflated by 20%).  With no landmarks the frame is
    assumed to be an aligned crop and canonical geometry is used.
    """

    provider_id = "geometry-parser"

    def parse(self, frame: np.ndarray,
              landmarks: np.ndarray | None = None) -> tuple[np.ndarray, tuple[int, int, int, int]]:
        h, w = frame.shape[:2]
        mask = np.zeros((h, w), np.float64)
        if landmarks is not None:
            pts = np.asarray(landmarks, dtype=np.float64)
            mouth = pts[MOUTH_IDX]
            cx = float(pts[:, 0].mean())
            cy = float(mouth[:, 1].mean())
            ax = float(pts[:, 0].max() - pts[:, 0].min()) * 0.42
            ay = float(mouth[:, 1].max() - mouth[:, 1].min()) * 0.5 + 0.12 * h
            mx0, mx1 = mouth[:, 0].min(), mouth[:, 0].max()
            my0, my1 = mouth[:, 1].min(), mouth[:, 1].max()
        else:
            cx, cy = w * 0.5, h * 0.78
            ax, ay = w * 0.32, h * 0.17
            mx0, mx1 = w * 0.35, w * 0.65
            my0, my1 = h * 0.70, h * 0.87
        cv2.ellipse(mask, (int(round(cx)), int(round(cy))),
                    (int(round(ax)), int(round(ay))), 0, 0, 360, 1.0, -1)
        mask = cv2.GaussianBlur(mask, (0, 0), max(h, w) * 0.015)
        mask = np.clip(mask, 0.0, 1.0)
        pad_x, pad_y = 0.1 * (mx1 - mx0), 0.1 * (my1 - my0)
        region = (
            max(0, int(mx0 - pad_x)), max(0, int(my0 - pad_y)),
            min(w, int(np.ceil(mx1 + pad_x))), min(h, int(np.ceil(my1 + pad_y))),
        )
        return mask, region


# ---------------------------------------------------------------------------
# registry


@dataclass
class ProviderRegistry:
    """One bundle of all external-model bindings used by a run."""

    features: FeatureProvider
    identity: IdentityEmbeddingProvider
    restoration: RestorationProvider
    parser: ParserProvider
    landmarks: LandmarkProvider
    coefficients: CoefficientProvider

    def manifest(self) -> dict:
        return {
            "features": self.features.provider_id,
            "identity": self.identity.provider_id,
            "restoration": self.restoration.provider_id,
            "parser": self.parser.provider_id,
            "landmarks": self.landmarks.provider_id,
            "coefficients": self.coefficients.provider_id,
        }


def default_registry(seed: int = 0) -> ProviderRegistry:
    return ProviderRegistry(
        features=FeaturePyramid(seed=seed),
        identity=RandomProjectionIdentity(seed=seed + 1),
        restoration=IdentityRestoration(),
        parser=GeometryParser(),
        landmarks=ToyLandmarkProvider(),
        coefficients=ToyCoefficientProvider(),
    )
