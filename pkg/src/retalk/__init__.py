"""Audio-driven talking-head video editing.

Three learned stages — expression neutralization, audio-conditioned
lower-face inpainting, identity-aware enhancement — plus alignment,
compositing, metrics, trainers and a procedural toy dataset that makes the
whole system testable on a desk.
"""

__version__ = "0.1.0"

from .config import PipelineConfig, config_hash, load_config, save_config, toy_config
from .errors import RetalkError
from .media_io import AudioTrack, VideoClip, load_audio, load_media, write_video
from .pipeline import (MetricReport, evaluate, load_models, run_lipsync,
                       run_pipeline, run_reenact, train_stage)
from .toydata import ToySample, generate_toy_dataset, load_toy_dataset

__all__ = [
    "AudioTrack",
    "MetricReport",
    "PipelineConfig",
    "RetalkError",
    "ToySample",
    "VideoClip",
    "__version__",
    "config_hash",
    "evaluate",
    "generate_toy_dataset",
    "load_audio",
    "load_config",
    "load_media",
    "load_models",
    "load_toy_dataset",
    "run_lipsync",
    "run_pipeline",
    "run_reenact",
    "save_config",
    "toy_config",
    "train_stage",
    "write_video",
]
