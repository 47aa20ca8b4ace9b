"""Seam-free frame compositing.

Multi-band Laplacian blending under a Gaussian-blurred soft mask, a parser
hook producing the blend mask and a teeth region, an optional region-local
enhancement pass, and paste-back of an edited aligned crop into the original
frame through the inverse alignment transform.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import NonInvertibleTransform, OutOfRange, ShapeMismatch, TooManyLevels
from .face_geometry import AlignmentTransform
from .providers import GeometryParser, ParserProvider, RestorationProvider

log = logging.getLogger(__name__)

_DEFAULT_PARSER = GeometryParser()

BLEND_LEVELS = 4


@dataclass
class Pyramid:
    """Gaussian levels G_0..G_L plus band-pass levels L_k = G_k - up(G_{k+1})."""

    gaussian: list[np.ndarray]
    laplacian: list[np.ndarray]

    @property
    def residual(self) -> np.ndarray:
        return self.gaussian[-1]


def _up(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return cv2.pyrUp(img, dstsize=(shape[1], shape[0]))


def build_pyramid(img: np.ndarray, levels: int) -> Pyramid:
    """Decompose with the 5-tap binomial kernel; levels halve with ceil."""
    if levels < 1:
        raise TooManyLevels("levels must be >= 1")
    h, w = img.shape[:2]
    if min(h, w) < 2 ** levels:
        raise TooManyLevels(
            f"{levels} levels need at least {2 ** levels}px per side, got {h}x{w}")
    g = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels):
        g.append(cv2.pyrDown(g[-1]))
    lap = [g[k] - _up(g[k + 1], g[k].shape[:2]) for k in range(levels)]
    return Pyramid(gaussian=g, laplacian=lap)


def reconstruct(pyr: Pyramid) -> np.ndarray:
    out = pyr.residual
    for lap in reversed(pyr.laplacian):
        out = _up(out, lap.shape[:2]) + lap
    return out


def _as_float_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[..., 0]
    if m.shape != shape:
        raise ShapeMismatch(f"mask {m.shape} does not match image {shape}")
    return np.clip(m, 0.0, 1.0)


def blend(source: np.ndarray, target: np.ndarray, mask: np.ndarray,
          levels: int = BLEND_LEVELS) -> np.ndarray:
    """Per-band convex mix: mask-weighted source bands over target bands."""
    if source.shape != target.shape:
        raise ShapeMismatch(f"source {source.shape} vs target {target.shape}")
    m = _as_float_mask(mask, source.shape[:2])
    src_p = build_pyramid(np.asarray(source, np.float64), levels)
    tgt_p = build_pyramid(np.asarray(target, np.float64), levels)
    mask_g = build_pyramid(m, levels).gaussian
    out_lap = []
    for k in range(levels):
        mk = mask_g[k][..., None] if source.ndim == 3 else mask_g[k]
        out_lap.append(mk * src_p.laplacian[k] + (1.0 - mk) * tgt_p.laplacian[k])
    mk = mask_g[levels][..., None] if source.ndim == 3 else mask_g[levels]
    residual = mk * src_p.residual + (1.0 - mk) * tgt_p.residual
    out = reconstruct(Pyramid(gaussian=[residual], laplacian=out_lap))
    if np.issubdtype(np.asarray(source).dtype, np.integer):
        return np.clip(np.rint(out), 0, 255).astype(np.asarray(source).dtype)
    return out


def parse_face(frame: np.ndarray, landmarks: np.ndarray | None = None,
               parser: ParserProvider | None = None):
    """Blend mask + teeth region for a frame, via the registered parser.

    A non-default parser is sanity-checked against the built-in geometry
    parser; disagreement is logged but never fatal.
    """
    active = parser or _DEFAULT_PARSER
    mask, region = active.parse(frame, landmarks)
    if active is not _DEFAULT_PARSER and not isinstance(active, GeometryParser):
        ref_mask, _ = _DEFAULT_PARSER.parse(frame, landmarks)
        inter = float(np.minimum(mask, ref_mask).sum())
        union = float(np.maximum(mask, ref_mask).sum())
        if union > 0 and inter / union < 0.5:
            log.warning("parser %r disagrees with default mask (IoU %.2f)",
                        getattr(active, "provider_id", "?"), inter / max(union, 1e-9))
    return np.clip(np.asarray(mask, np.float64), 0.0, 1.0), region


def _feather(h: int, w: int, margin: int) -> np.ndarray:
    """Ramp from 0 at the patch border to 1 inside; exactly 0 on the edge."""
    margin = max(margin, 1)
    ys = np.minimum(np.arange(h), np.arange(h)[::-1]) / margin
    xs = np.minimum(np.arange(w), np.arange(w)[::-1]) / margin
    return np.clip(np.minimum(ys[:, None], xs[None, :]), 0.0, 1.0)


def enhance_teeth(frame: np.ndarray, teeth_region: tuple[int, int, int, int],
                  restoration: RestorationProvider) -> np.ndarray:
    """Run the restoration provider on the teeth box, feather-blend it back."""
    x0, y0, x1, y1 = teeth_region
    h, w = frame.shape[:2]
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise OutOfRange(f"teeth region {teeth_region} outside frame {w}x{h}")
    patch = frame[y0:y1, x0:x1]
    restored = restoration.restore(patch)
    if restored.shape[:2] != patch.shape[:2]:
        restored = cv2.resize(restored, (patch.shape[1], patch.shape[0]),
                              interpolation=cv2.INTER_AREA)
    m = _feather(y1 - y0, x1 - x0, margin=max((y1 - y0) // 5, 1))[..., None]
    mixed = patch.astype(np.float64) * (1.0 - m) + restored.astype(np.float64) * m
    out = frame.copy()
    if np.issubdtype(frame.dtype, np.integer):
        out[y0:y1, x0:x1] = np.clip(np.rint(mixed), 0, 255).astype(frame.dtype)
    else:
        out[y0:y1, x0:x1] = mixed
    return out


def paste_back(original_frame: np.ndarray, enhanced_crop: np.ndarray,
               transform: AlignmentTransform, mask: np.ndarray,
               levels: int = BLEND_LEVELS) -> np.ndarray:
    """Inverse-warp the crop and its mask, then multi-band blend over the frame.

    Pixels whose warped mask is exactly zero are copied through unchanged, so
    regions far from the face are bit-identical to the original.
    """
    h, w = original_frame.shape[:2]
    try:
        inv = transform.inverse()
    except NonInvertibleTransform:
        raise
    m = _as_float_mask(mask, enhanced_crop.shape[:2])
    warped = cv2.warpAffine(enhanced_crop, inv.matrix, (w, h),
                            flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
    warped_mask = cv2.warpAffine(m, inv.matrix, (w, h),
                                 flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
    warped_mask = np.clip(warped_mask, 0.0, 1.0)
    blended = blend(warped, original_frame, warped_mask, levels=levels)
    untouched = (warped_mask == 0.0)[..., None] if original_frame.ndim == 3 else (warped_mask == 0.0)
    return np.where(untouched, original_frame, blended)
