"""Video/audio ingestion, mel-spectrogram computation, and audio-window alignment.

Audio is carried at a fixed 16 kHz mono; mel spectrograms use an 800-sample
FFT window with a 200-sample hop, giving 80 mel columns per second.  A
16-column window therefore covers exactly 0.2 s of audio per video frame.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import (
    DecodeFailure,
    EmptyAudio,
    MissingStream,
    OutOfRange,
    UnsupportedCodec,
)

SAMPLE_RATE = 16000
N_FFT = 800
HOP = 200
N_MELS = 80
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
LOG_FLOOR = 1e-5
WINDOW_COLS = 16  # 16 cols * 200 hop / 16000 Hz = 0.2 s


@dataclass
class VideoClip:
    """A decoded frame sequence with its frame rate.

    frames: uint8 RGB array of shape (T, H, W, 3).
    """

    frames: np.ndarray
    fps: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {self.frames.dtype}")
        if len(self.frames) < 1:
            raise ValueError("clip must contain at least one frame")
        if not (self.fps > 0):
            raise ValueError(f"fps must be positive, got {self.fps}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> tuple[int, int]:
        """(height, width) of every frame."""
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class AudioTrack:
    """Mono waveform in [-1, 1] at a known sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError("samples must be mono (1-D)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    """80-band log-mel matrix, one column per hop."""

    values: np.ndarray
    hop: int = HOP
    win: int = N_FFT

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != N_MELS:
            raise ValueError(f"mel must be ({N_MELS}, T), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mel values must be finite")

    @property
    def columns(self) -> int:
        return self.values.shape[1]


@dataclass
class MelWindow:
    """An 80 x 16 conditioning slice tied to a video frame."""

    values: np.ndarray
    frame_index: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != (N_MELS, WINDOW_COLS):
            raise ValueError(f"window must be ({N_MELS}, {WINDOW_COLS}), got {self.values.shape}")


def _to_float_mono(data: np.ndarray) -> np.ndarray:
    """Normalize a wavfile payload to float32 mono in [-1, 1]."""
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        return (data / 32768.0).astype(np.float32)
    if data.dtype == np.int32:
        return (data / 2147483648.0).astype(np.float32)
    if data.dtype == np.uint8:
        return ((data.astype(np.float32) - 128.0) / 128.0).astype(np.float32)
    return np.clip(data.astype(np.float32), -1.0, 1.0)


def load_audio(path: str | Path) -> AudioTrack:
    """Read a WAV file and resample it to 16 kHz mono."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise UnsupportedCodec(f"cannot read {path}: {exc}") from exc
    samples = _to_float_mono(np.asarray(data))
    if rate != SAMPLE_RATE:
        g = math.gcd(SAMPLE_RATE, rate)
        samples = resample_poly(samples, SAMPLE_RATE // g, rate // g).astype(np.float32)
    samples = np.clip(samples, -1.0, 1.0)
    return AudioTrack(samples=samples, sample_rate=SAMPLE_RATE)


def load_media(
    path: str | Path,
    audio_path: str | Path | None = None,
    require_audio: bool = True,
) -> tuple[VideoClip, AudioTrack | None]:
    """Decode a video container and its audio track.

    The host decoder (OpenCV) does not expose embedded audio streams, so audio
    resolves in order: an explicit ``audio_path``, then a sibling ``.wav`` with
    the same stem.  With ``require_audio`` (the inference default) a missing
    track raises :class:`MissingStream`; preprocessing commands pass False.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)

    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise DecodeFailure(f"no decodable video stream in {path}")
    fps = cap.get(cv2.CAP_PROP_FPS)
    frames = []
    while True:
        ok, frame = cap.read()
        if not ok:
            break
        frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    cap.release()
    if not frames:
        raise DecodeFailure(f"no frames decoded from {path}")
    if fps <= 0:
        fps = 25.0
    clip = VideoClip(frames=np.stack(frames), fps=float(fps))

    track = None
    if audio_path is not None:
        track = load_audio(audio_path)
    else:
        sibling = path.with_suffix(".wav")
        if sibling.exists():
            track = load_audio(sibling)
    if track is None and require_audio:
        raise MissingStream(f"no audio stream for {path} (pass an explicit wav)")
    return clip, track


def write_video(clip: VideoClip, path: str | Path) -> Path:
    """Write a clip to disk; .avi uses MJPG, anything else mp4v."""
    path = Path(path)
    fourcc = "MJPG" if path.suffix.lower() == ".avi" else "mp4v"
    h, w = clip.size
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*fourcc), clip.fps, (w, h))
    if not writer.isOpened():
        raise DecodeFailure(f"cannot open video writer for {path}")
    for frame in clip.frames:
        writer.write(cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    writer.release()
    return path


def write_wav(track: AudioTrack, path: str | Path) -> Path:
    path = Path(path)
    pcm = np.clip(track.samples, -1.0, 1.0)
    wavfile.write(str(path), track.sample_rate, (pcm * 32767.0).astype(np.int16))
    return path


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = MEL_FMIN, fmax: float = MEL_FMAX) -> np.ndarray:
    """Center frequency (Hz) of each triangular mel filter."""
    pts = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    fmin: float = MEL_FMIN,
    fmax: float = MEL_FMAX,
) -> np.ndarray:
    """Triangular mel filterbank of shape (n_mels, n_fft // 2 + 1)."""
    pts = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, center, hi = pts[m], pts[m + 1], pts[m + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb.astype(np.float64)


def compute_mel(audio: AudioTrack) -> MelSpectrogram:
    """Log-mel spectrogram with center (reflect) padding.

    T = floor(N / hop) + 1 columns for N input samples, independent of the
    window size, with each column centered on its hop-aligned sample time.
    """
    if audio.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {audio.sample_rate}")
    n = len(audio.samples)
    if n == 0:
        raise EmptyAudio("audio track is empty")

    pad = N_FFT // 2
    x = np.asarray(audio.samples, dtype=np.float64)
    if n > 1:
        x = np.pad(x, (pad, pad), mode="reflect")
    else:
        x = np.pad(x, (pad, pad), mode="edge")
    n_frames = n // HOP + 1
    window = np.hanning(N_FFT + 1)[:-1]  # periodic Hann
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(n_frames)[:, None]
    spec = np.abs(np.fft.rfft(x[idx] * window, axis=1))  # (T, n_fft // 2 + 1)
    mel = mel_filterbank() @ spec.T  # (80, T)
    return MelSpectrogram(values=np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32))


def mel_window(mel: MelSpectrogram, frame_index: int, fps: float) -> MelWindow:
    """The 0.2 s mel slice conditioning one video frame.

    Columns [s, s + 16) with s = floor(frame_index * 80 / fps); raises
    OutOfRange when the slice runs past the spectrogram so the caller can
    decide to zero-pad or stop.
    """
    if frame_index < 0:
        raise OutOfRange(f"frame_index must be >= 0, got {frame_index}")
    start = int(frame_index * (SAMPLE_RATE / HOP) / fps)
    if start + WINDOW_COLS > mel.columns:
        raise OutOfRange(
            f"window [{start}, {start + WINDOW_COLS}) exceeds {mel.columns} mel columns"
        )
    return MelWindow(values=mel.values[:, start : start + WINDOW_COLS].copy(), frame_index=frame_index)


def mel_window_count(mel: MelSpectrogram, n_frames: int, fps: float) -> int:
    """Number of leading video frames that have a full in-range mel window."""
    count = 0
    for t in range(n_frames):
        start = int(t * (SAMPLE_RATE / HOP) / fps)
        if start + WINDOW_COLS > mel.columns:
            break
        count += 1
    return count


def write_mel(mel: MelSpectrogram, path: str | Path) -> Path:
    """Fixture format: u32le rows, u32le cols, then row-major float32le."""
    path = Path(path)
    rows, cols = mel.values.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(mel.values, dtype="<f4").tobytes())
    return path


def read_mel(path: str | Path) -> MelSpectrogram:
    with open(path, "rb") as fh:
        rows, cols = struct.unpack("<II", fh.read(8))
        values = np.frombuffer(fh.read(rows * cols * 4), dtype="<f4").reshape(rows, cols)
    return MelSpectrogram(values=values.copy())
