"""Landmark smoothing, anchor-based face alignment, and 3DMM coefficient editing.

Alignment maps two eye centers and the nose tip onto fixed canonical positions
in a 256 x 256 crop via a least-squares similarity transform.  Coefficients
follow the 64-dim expression + 3+3 pose convention of the default
reconstruction provider; the dimensions live in config so an alternate
provider may override them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    BadWindow,
    DegenerateAnchors,
    DimensionMismatch,
    NonInvertibleTransform,
    RatioOutOfRange,
)

CROP_SIZE = 256
# Canonical anchor positions inside the crop (fractions of CROP_SIZE).
CANONICAL_ANCHORS = np.array(
    [
        [0.35 * CROP_SIZE, 0.40 * CROP_SIZE],  # left eye center
        [0.65 * CROP_SIZE, 0.40 * CROP_SIZE],  # right eye center
        [0.50 * CROP_SIZE, 0.60 * CROP_SIZE],  # nose tip
    ],
    dtype=np.float64,
)

EXPRESSION_DIM = 64
POSE_DIM = 6

# 68-point detector convention.
LEFT_EYE_IDX = slice(36, 42)
RIGHT_EYE_IDX = slice(42, 48)
NOSE_TIP_IDX = 30
MOUTH_IDX = slice(48, 68)


@dataclass
class LandmarkTrack:
    """Per-frame 2D landmarks, shape (T, K, 2)."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[-1] != 2:
            raise ValueError(f"points must be (T, K, 2), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_points(self) -> int:
        return self.points.shape[1]


@dataclass
class AlignmentTransform:
    """Similarity transform from source pixels into the canonical crop."""

    scale: float
    rotation: float
    translation: tuple[float, float]

    def __post_init__(self):
        if not (self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def matrix(self) -> np.ndarray:
        """2x3 affine matrix mapping source coordinates to crop coordinates."""
        c = self.scale * np.cos(self.rotation)
        s = self.scale * np.sin(self.rotation)
        tx, ty = self.translation
        return np.array([[c, -s, tx], [s, c, ty]], dtype=np.float64)

    def inverse(self) -> "AlignmentTransform":
        if self.scale < 1e-9:
            raise NonInvertibleTransform(f"scale {self.scale} too small to invert")
        inv = cv2.invertAffineTransform(self.matrix)
        a, b = inv[0, 0], inv[1, 0]
        return AlignmentTransform(
            scale=float(np.hypot(a, b)),
            rotation=float(np.arctan2(b, a)),
            translation=(float(inv[0, 2]), float(inv[1, 2])),
        )

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def scaled(self, factor: float) -> "AlignmentTransform":
        """Compose with a uniform post-scale (e.g. crop-256 to crop-384 space)."""
        tx, ty = self.translation
        return AlignmentTransform(
            scale=self.scale * factor,
            rotation=self.rotation,
            translation=(tx * factor, ty * factor),
        )

    def compose(self, inner: "AlignmentTransform") -> "AlignmentTransform":
        """self o inner: apply `inner` first, then this transform."""
        t = self.apply_points(np.asarray(inner.translation))
        return AlignmentTransform(
            scale=self.scale * inner.scale,
            rotation=self.rotation + inner.rotation,
            translation=(float(t[0]), float(t[1])),
        )


@dataclass
class CoeffSequence:
    """Per-frame expression and pose coefficients."""

    expression: np.ndarray  # (T, 64)
    pose: np.ndarray  # (T, 6): rotation 3-vector + translation 3-vector

    def __post_init__(self):
        self.expression = np.asarray(self.expression, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.expression.ndim != 2 or self.pose.ndim != 2:
            raise ValueError("expression and pose must be 2-D (T, dim)")
        if len(self.expression) != len(self.pose):
            raise ValueError("expression and pose must cover the same frames")
        if not (np.all(np.isfinite(self.expression)) and np.all(np.isfinite(self.pose))):
            raise ValueError("coefficients must be finite")

    def __len__(self) -> int:
        return len(self.expression)

    def copy(self) -> "CoeffSequence":
        return CoeffSequence(self.expression.copy(), self.pose.copy())


@dataclass
class ExpressionTemplate:
    """A canonical expression vector with a human-readable label."""

    expression: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.expression = np.asarray(self.expression, dtype=np.float64)
        if self.expression.ndim != 1:
            raise ValueError("template expression must be 1-D")
        if not np.all(np.isfinite(self.expression)):
            raise ValueError("template expression must be finite")


def load_template(path: str | Path) -> ExpressionTemplate:
    with open(path) as fh:
        payload = json.load(fh)
    return ExpressionTemplate(expression=np.asarray(payload["expression"], dtype=np.float64),
                              label=str(payload.get("label", "")))


def save_template(template: ExpressionTemplate, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump({"label": template.label, "expression": template.expression.tolist()}, fh, indent=2)
    return path


def builtin_template(name: str) -> ExpressionTemplate:
    """Load a template shipped with the package ('neutral' or 'smile')."""
    return load_template(Path(__file__).parent / "templates" / f"{name}.json")


def smooth_landmarks(track: LandmarkTrack, window: int = 7, polyorder: int = 2) -> LandmarkTrack:
    """Temporal Savitzky-Golay smoothing of every coordinate channel.

    Interior samples get the classic centered least-squares fit; the first and
    last half-window samples are fit on the truncated one-sided window so the
    track keeps its length.
    """
    if window % 2 == 0 or window < 3:
        raise BadWindow(f"window must be odd and >= 3, got {window}")
    if polyorder >= window:
        raise BadWindow(f"polyorder {polyorder} must be < window {window}")
    if len(track) < window:
        raise BadWindow(f"track length {len(track)} shorter than window {window}")

    t, k, _ = track.points.shape
    y = track.points.reshape(t, k * 2)
    half = window // 2
    out = np.empty_like(y)

    # Centered windows share one evaluation row: value = c . y[i-half : i+half+1].
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    design = np.vander(offsets, polyorder + 1, increasing=True)
    center_row = np.linalg.pinv(design)[0]
    for i in range(half, t - half):
        out[i] = center_row @ y[i - half : i + half + 1]

    for i in list(range(half)) + list(range(t - half, t)):
        lo, hi = max(0, i - half), min(t, i + half + 1)
        offs = np.arange(lo, hi, dtype=np.float64) - i
        a = np.vander(offs, polyorder + 1, increasing=True)
        beta, *_ = np.linalg.lstsq(a, y[lo:hi], rcond=None)
        out[i] = beta[0]

    return LandmarkTrack(points=out.reshape(t, k, 2))


def anchor_points(landmarks: np.ndarray) -> np.ndarray:
    """Extract (left eye center, right eye center, nose tip) from 68 points."""
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.ndim != 2 or landmarks.shape[0] < 68:
        raise ValueError(f"expected a (68, 2) landmark frame, got {landmarks.shape}")
    return np.stack(
        [
            landmarks[LEFT_EYE_IDX].mean(axis=0),
            landmarks[RIGHT_EYE_IDX].mean(axis=0),
            landmarks[NOSE_TIP_IDX],
        ]
    )


def _similarity_from_anchors(src: np.ndarray, dst: np.ndarray) -> AlignmentTransform:
    """Least-squares similarity (scale, rotation, translation) src -> dst."""
    spread = max(np.linalg.norm(src[i] - src[j]) for i in range(3) for j in range(i + 1, 3))
    if spread < 1e-9:
        raise DegenerateAnchors("anchors are coincident")
    v1, v2 = src[1] - src[0], src[2] - src[0]
    area = abs(v1[0] * v2[1] - v1[1] * v2[0]) / 2.0
    if area < 1e-9 * spread * spread:
        raise DegenerateAnchors("anchors are collinear")

    # Unknowns (a, b, tx, ty) with x' = a x - b y + tx, y' = b x + a y + ty.
    rows, rhs = [], []
    for (x, y), (xp, yp) in zip(src, dst):
        rows.append([x, -y, 1.0, 0.0])
        rows.append([y, x, 0.0, 1.0])
        rhs.extend([xp, yp])
    sol, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(rhs), rcond=None)
    a, b, tx, ty = sol
    scale = float(np.hypot(a, b))
    if scale < 1e-9:
        raise DegenerateAnchors("solved scale is numerically zero")
    return AlignmentTransform(scale=scale, rotation=float(np.arctan2(b, a)), translation=(float(tx), float(ty)))


def align_face(
    frame: np.ndarray,
    landmarks: np.ndarray,
    crop_size: int = CROP_SIZE,
) -> tuple[np.ndarray, AlignmentTransform]:
    """Warp a frame into the canonical crop using eye/nose anchors.

    Returns the bilinear crop (crop_size square) and the transform that
    produced it; the transform's inverse pastes crop-space pixels back.
    """
    src = anchor_points(landmarks)
    dst = CANONICAL_ANCHORS * (crop_size / CROP_SIZE)
    transform = _similarity_from_anchors(src, dst)
    crop = cv2.warpAffine(
        frame,
        transform.matrix,
        (crop_size, crop_size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REPLICATE,
    )
    return crop, transform


def replace_expression(coeffs: CoeffSequence, template: ExpressionTemplate) -> CoeffSequence:
    """Overwrite every frame's expression with the template; pose untouched."""
    if template.expression.shape[0] != coeffs.expression.shape[1]:
        raise DimensionMismatch(
            f"template dim {template.expression.shape[0]} != coeff dim {coeffs.expression.shape[1]}"
        )
    out = coeffs.copy()
    out.expression[:] = template.expression
    return out


def interpolate_templates(a: ExpressionTemplate, b: ExpressionTemplate, ratio: float) -> ExpressionTemplate:
    """Componentwise (1 - ratio) * a + ratio * b."""
    if not (0.0 <= ratio <= 1.0):
        raise RatioOutOfRange(f"ratio must be within [0, 1], got {ratio}")
    if a.expression.shape != b.expression.shape:
        raise DimensionMismatch(f"{a.expression.shape} vs {b.expression.shape}")
    label = a.label if ratio == 0.0 else b.label if ratio == 1.0 else f"{a.label}~{b.label}@{ratio:g}"
    return ExpressionTemplate(expression=(1.0 - ratio) * a.expression + ratio * b.expression, label=label)
