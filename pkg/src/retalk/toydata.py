"""Procedural toy talking-head clips with exact audio/mouth ground truth.

Each clip is a flat-shaded avatar (face disc, eyes, nose dot, elliptical
mouth) whose mouth aperture a(t) in [0, 1] equals the clip's per-frame audio
amplitude envelope by construction: the waveform for frame t is a(t) times a
200 Hz carrier, which fits exactly eight periods into one 25 fps frame, so
the envelope is recoverable to float precision.  The avatar head drifts
smoothly so alignment and warping have real work to do.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .face_geometry import CoeffSequence, EXPRESSION_DIM, LandmarkTrack
from .media_io import SAMPLE_RATE, AudioTrack, VideoClip, write_wav

FPS = 25
CARRIER_HZ = 200  # eight full periods per 640-sample frame at 16 kHz
SAMPLES_PER_FRAME = SAMPLE_RATE // FPS

# Geometry as fractions of the frame side.
FACE_RADIUS = 0.36
EYE_OFFSET = (0.16, -0.10)
EYE_RADIUS = 0.035
NOSE_OFFSET = (0.0, 0.04)
MOUTH_OFFSET = (0.0, 0.18)
MOUTH_HALF_W = 0.11
MOUTH_HALF_H = 0.07  # at full aperture


@dataclass
class ToySample:
    """One toy clip with all of its ground truth."""

    clip: VideoClip
    audio: AudioTrack
    aperture: np.ndarray  # (T,) in [0, 1]
    centers: np.ndarray  # (T, 2) face center per frame, pixels
    identity: dict
    name: str = "toy"
    smile: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.clip.frames.shape[1]


def toy_identity(rng: np.random.Generator) -> dict:
    """Seeded colors and geometry jitter for one avatar."""
    return {
        "skin": [int(200 + rng.integers(-25, 26)), int(165 + rng.integers(-25, 26)),
                 int(145 + rng.integers(-25, 26))],
        "eye": [30, 30, 40],
        "mouth": [45, 16, 22],
        "background": [int(95 + rng.integers(-25, 26))] * 3,
        "face_radius": float(FACE_RADIUS * (1.0 + 0.05 * rng.uniform(-1, 1))),
        "mouth_half_w": float(MOUTH_HALF_W * (1.0 + 0.1 * rng.uniform(-1, 1))),
    }


def aperture_track(rng: np.random.Generator, n_frames: int) -> np.ndarray:
    """Speech-like envelope: bursts of per-frame articulation-level hops.

    Each burst picks a loudness, then hops between three visibly distinct
    open levels with consecutive frames always differing, separated by short
    closures.  Any few-frame excerpt is then a near-unique temporal pattern,
    so a small time offset is clearly distinguishable from the aligned
    reading (flat or slowly ramping envelopes make offset windows collide).
    """
    levels = np.array([0.4, 0.7, 1.0])
    a = np.zeros(n_frames)
    t = int(rng.integers(0, 3))
    while t < n_frames:
        burst = int(rng.integers(4, 11))
        peak = rng.uniform(0.6, 1.0)
        idx = int(rng.integers(0, 3))
        for i in range(t, min(t + burst, n_frames)):
            a[i] = levels[idx] * peak
            idx = (idx + 1 + int(rng.integers(0, 2))) % 3
        t += burst + int(rng.integers(0, 3))
    return np.clip(a, 0.0, 1.0)


def motion_track(rng: np.random.Generator, n_frames: int, size: int) -> np.ndarray:
    """Slow sinusoidal head drift around the frame center, in pixels."""
    tt = np.arange(n_frames) / FPS
    amp = 0.02 * size
    fx, fy = rng.uniform(0.2, 0.6, size=2)
    px, py = rng.uniform(0, 2 * np.pi, size=2)
    dx = amp * np.sin(2 * np.pi * fx * tt + px)
    dy = amp * np.sin(2 * np.pi * fy * tt + py)
    base = np.array([size / 2.0, size / 2.0])
    return base[None, :] + np.stack([dx, dy], axis=1)


def render_frame(identity: dict, size: int, center: np.ndarray,
                 aperture: float, smile: float = 0.0) -> np.ndarray:
    """Rasterize one avatar frame (uint8 RGB)."""
    shift = 4
    s = 1 << shift

    def pt(x, y):
        return int(round(x * s)), int(round(y * s))

    img = np.full((size, size, 3), np.array(identity["background"], np.uint8), np.uint8)
    cx, cy = float(center[0]), float(center[1])
    r = identity["face_radius"] * size
    cv2.circle(img, pt(cx, cy), int(round(r * s)), tuple(int(c) for c in identity["skin"]),
               -1, cv2.LINE_AA, shift)
    for sx in (-1, 1):
        ex, ey = cx + sx * EYE_OFFSET[0] * size, cy + EYE_OFFSET[1] * size
        cv2.circle(img, pt(ex, ey), int(round(EYE_RADIUS * size * s)),
                   tuple(int(c) for c in identity["eye"]), -1, cv2.LINE_AA, shift)
    nose = np.array(identity["skin"]) * 0.82
    cv2.circle(img, pt(cx + NOSE_OFFSET[0] * size, cy + NOSE_OFFSET[1] * size),
               int(round(0.014 * size * s)), tuple(int(c) for c in nose), -1, cv2.LINE_AA, shift)
    half_h = aperture * MOUTH_HALF_H * size
    if half_h >= 0.5:
        half_w = identity["mouth_half_w"] * size * (1.0 + 0.35 * smile)
        my = cy + MOUTH_OFFSET[1] * size - 0.03 * smile * size
        cv2.ellipse(img, pt(cx, my), (int(round(half_w * s)), int(round(half_h * s))),
                    0, 0, 360, tuple(int(c) for c in identity["mouth"]), -1, cv2.LINE_AA, shift)
    return img


def synth_audio(aperture: np.ndarray) -> np.ndarray:
    """Carrier-times-envelope waveform, float64, SAMPLES_PER_FRAME per frame."""
    n = len(aperture) * SAMPLES_PER_FRAME
    t = np.arange(n, dtype=np.float64)
    carrier = np.sin(2 * np.pi * CARRIER_HZ * t / SAMPLE_RATE)
    env = np.repeat(np.asarray(aperture, dtype=np.float64), SAMPLES_PER_FRAME)
    return env * carrier


def toy_landmarks(identity: dict, size: int, centers: np.ndarray,
                  aperture: np.ndarray, smile: np.ndarray | None = None) -> LandmarkTrack:
    """A 68-point track synthesized from the avatar geometry."""
    n = len(centers)
    smile = np.zeros(n) if smile is None else smile
    pts = np.zeros((n, 68, 2))
    r = identity["face_radius"] * size
    for i in range(n):
        cx, cy = centers[i]
        # 0-16 jaw: lower arc of the face disc
        ang = np.linspace(np.pi * 0.15, np.pi * 0.85, 17)
        pts[i, 0:17, 0] = cx - np.cos(ang) * r
        pts[i, 0:17, 1] = cy + np.sin(ang) * r
        # 17-26 brows
        for k in range(5):
            off = (k - 2) * 0.035 * size
            pts[i, 17 + k] = (cx - EYE_OFFSET[0] * size + off, cy + (EYE_OFFSET[1] - 0.07) * size)
            pts[i, 22 + k] = (cx + EYE_OFFSET[0] * size + off, cy + (EYE_OFFSET[1] - 0.07) * size)
        # 27-35 nose bridge and base; 30 is the tip
        for k in range(4):
            pts[i, 27 + k] = (cx, cy + (-0.06 + 0.033 * k) * size)
        pts[i, 30] = (cx + NOSE_OFFSET[0] * size, cy + NOSE_OFFSET[1] * size)
        for k in range(5):
            pts[i, 31 + k] = (cx + (k - 2) * 0.015 * size, cy + 0.07 * size)
        # 36-47 eye hexagons
        hexa = np.linspace(0, 2 * np.pi, 7)[:6]
        er = EYE_RADIUS * size
        for j, sx in enumerate((-1, 1)):
            ex, ey = cx + sx * EYE_OFFSET[0] * size, cy + EYE_OFFSET[1] * size
            pts[i, 36 + 6 * j : 42 + 6 * j, 0] = ex + np.cos(hexa) * er
            pts[i, 36 + 6 * j : 42 + 6 * j, 1] = ey + np.sin(hexa) * er
        # 48-67 mouth ellipse samples
        half_w = identity["mouth_half_w"] * size * (1.0 + 0.35 * smile[i])
        half_h = max(aperture[i] * MOUTH_HALF_H * size, 0.004 * size)
        my = cy + MOUTH_OFFSET[1] * size - 0.03 * smile[i] * size
        ang = np.linspace(0, 2 * np.pi, 21)[:20]
        pts[i, 48:68, 0] = cx + np.cos(ang) * half_w
        pts[i, 48:68, 1] = my + np.sin(ang) * half_h
    return LandmarkTrack(points=pts)


def toy_coefficients(aperture: np.ndarray, centers: np.ndarray, size: int,
                     smile: np.ndarray | None = None) -> CoeffSequence:
    """Ground-truth coefficients: expr[0]=aperture, expr[1]=smile, pose=drift."""
    n = len(aperture)
    expr = np.zeros((n, EXPRESSION_DIM))
    expr[:, 0] = aperture
    if smile is not None:
        expr[:, 1] = smile
    pose = np.zeros((n, 6))
    pose[:, 3] = (centers[:, 0] - size / 2.0) / size
    pose[:, 4] = (centers[:, 1] - size / 2.0) / size
    return CoeffSequence(expression=expr, pose=pose)


def make_toy_sample(seed: int, seconds: float = 4.0, size: int = 128,
                    name: str = "toy") -> ToySample:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_frames = int(round(seconds * FPS))
    identity = toy_identity(rng)
    aperture = aperture_track(rng, n_frames)
    centers = motion_track(rng, n_frames, size)
    frames = np.stack([
        render_frame(identity, size, centers[i], float(aperture[i])) for i in range(n_frames)
    ])
    samples = synth_audio(aperture)
    return ToySample(
        clip=VideoClip(frames=frames, fps=float(FPS)),
        audio=AudioTrack(samples=samples.astype(np.float32)),
        aperture=aperture,
        centers=centers,
        identity=identity,
        name=name,
    )


def sample_landmarks(sample: ToySample) -> LandmarkTrack:
    return toy_landmarks(sample.identity, sample.size, sample.centers, sample.aperture, sample.smile)


def sample_coefficients(sample: ToySample) -> CoeffSequence:
    return toy_coefficients(sample.aperture, sample.centers, sample.size, sample.smile)


def measure_aperture(frame: np.ndarray, mouth_center: np.ndarray, size: int,
                     threshold: float = 100.0) -> float:
    """Estimate mouth aperture from dark-pixel area near the expected mouth.

    Calibrated so a rasterized full-aperture ellipse reads close to 1.0;
    robust to mild blur because it thresholds luminance halfway between the
    mouth interior and skin tones.
    """
    mx = float(mouth_center[0] + MOUTH_OFFSET[0] * size)
    my = float(mouth_center[1] + MOUTH_OFFSET[1] * size)
    hw, hh = int(0.16 * size), int(0.13 * size)
    x0, x1 = max(0, int(mx - hw)), min(frame.shape[1], int(mx + hw))
    y0, y1 = max(0, int(my - hh)), min(frame.shape[0], int(my + hh))
    if x1 <= x0 or y1 <= y0:
        return 0.0
    patch = frame[y0:y1, x0:x1].astype(np.float64).mean(axis=2)
    dark = float((patch < threshold).sum())
    full = np.pi * (MOUTH_HALF_W * size) * (MOUTH_HALF_H * size)
    return dark / full


def mean_clip_aperture(frames: np.ndarray, centers: np.ndarray, size: int) -> float:
    vals = [measure_aperture(frames[i], centers[i], size) for i in range(len(frames))]
    return float(np.mean(vals))


def save_toy_sample(sample: ToySample, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "frames.npy", sample.clip.frames)
    np.save(out_dir / "audio.npy", sample.audio.samples.astype(np.float64))
    np.save(out_dir / "aperture.npy", sample.aperture)
    np.save(out_dir / "centers.npy", sample.centers)
    write_wav(sample.audio, out_dir / "audio.wav")
    meta = {"identity": sample.identity, "fps": FPS, "size": sample.size, "name": sample.name}
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    return out_dir


def load_toy_sample(clip_dir: str | Path) -> ToySample:
    clip_dir = Path(clip_dir)
    meta = json.loads((clip_dir / "meta.json").read_text())
    frames = np.load(clip_dir / "frames.npy")
    samples = np.load(clip_dir / "audio.npy")
    return ToySample(
        clip=VideoClip(frames=frames, fps=float(meta["fps"])),
        audio=AudioTrack(samples=samples.astype(np.float32)),
        aperture=np.load(clip_dir / "aperture.npy"),
        centers=np.load(clip_dir / "centers.npy"),
        identity=meta["identity"],
        name=meta["name"],
    )


def generate_toy_dataset(n_clips: int, seconds: float, seed: int,
                         root: str | Path, size: int = 128) -> list[Path]:
    """Write n_clips procedurally generated clips; bit-identical per seed."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    dirs = []
    for i in range(n_clips):
        child_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(i,)).generate_state(1)[0])
        sample = make_toy_sample(child_seed, seconds=seconds, size=size, name=f"clip_{i:04d}")
        dirs.append(save_toy_sample(sample, root / f"clip_{i:04d}"))
    return dirs


def load_toy_dataset(root: str | Path) -> list[ToySample]:
    root = Path(root)
    return [load_toy_sample(d) for d in sorted(root.iterdir()) if (d / "meta.json").exists()]
