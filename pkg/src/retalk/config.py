"""Run configuration: nested stage sections, JSON/TOML loading, toy profile.

A config is an ordinary dataclass tree.  `config_hash` is the sha256 of the
canonical JSON form and is stamped into checkpoints and metric reports so any
run can be replayed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

RESOLUTIONS = (256, 96, 384)  # reenact crop, lipsync crop, enhanced crop


@dataclass
class DnetSection:
    base_channels: int = 64
    max_channels: int = 256
    latent_dim: int = 256
    window: int = 27
    lambda_c: float = 1.0
    lambda_s: float = 250.0
    lr: float = 1e-4
    phase1_iterations: int = 2000
    phase2_iterations: int = 2000
    batch_size: int = 1


@dataclass
class LnetSection:
    enc_channels: tuple = (32, 64)
    dec_channels: tuple = (64, 32, 24)
    ffc_blocks_per_stage: int = 9
    attention_blocks: int = 2
    lambda_l1: float = 1.0
    lambda_p: float = 1.0
    lambda_sync: float = 0.3
    lr: float = 1e-4
    iterations: int = 4000
    batch_size: int = 1


@dataclass
class EnetSection:
    up_channels: tuple = (48, 24)
    id_channels: tuple = (32, 64, 128, 192, 256, 256)
    lambda_l1: float = 0.2
    lambda_p: float = 1.0
    lambda_adv: float = 100.0
    lambda_id: float = 0.4
    lr: float = 1e-5
    iterations: int = 2000
    batch_size: int = 1
    jpeg_quality_min: int = 30
    jpeg_quality_max: int = 95


@dataclass
class SyncSection:
    base_channels: int = 32
    lr: float = 1e-4
    iterations: int = 2000
    batch_size: int = 8
    margin: float = 0.3


@dataclass
class PipelineConfig:
    seed: int
    resolutions: tuple = RESOLUTIONS
    experimental: bool = False
    reenact_mode: str = "video_to_video"
    template_path: str | None = None
    interpolation_ratio: float | None = None
    blend_levels: int = 4
    providers: dict = field(default_factory=lambda: {
        "features": "feature-pyramid",
        "identity": "random-projection-identity",
        "restoration": "identity",
        "parser": "geometry-parser",
        "landmarks": "toy-landmarks",
        "coefficients": "toy-coefficients",
    })
    dnet: DnetSection = field(default_factory=DnetSection)
    lnet: LnetSection = field(default_factory=LnetSection)
    enet: EnetSection = field(default_factory=EnetSection)
    sync: SyncSection = field(default_factory=SyncSection)

    def __post_init__(self):
        self.resolutions = tuple(self.resolutions)
        if not self.experimental and self.resolutions != RESOLUTIONS:
            raise ValueError(
                f"resolutions are fixed to {RESOLUTIONS}; set experimental=true to override")
        if self.reenact_mode not in ("one_shot", "video_to_video"):
            raise ValueError(f"unknown reenact mode {self.reenact_mode!r}")


_SECTIONS = {"dnet": DnetSection, "lnet": LnetSection,
             "enet": EnetSection, "sync": SyncSection}


def _build_section(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    if "seed" not in data:
        raise ValueError("config requires an explicit 'seed'")
    data = dict(data)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(cls, data.pop(name))
    top_names = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(data) - top_names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for k, v in data.items():
        kwargs[k] = tuple(v) if k == "resolutions" and isinstance(v, list) else v
    return PipelineConfig(**kwargs)


def config_to_dict(cfg: PipelineConfig) -> dict:
    def enc(obj):
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    raw = dataclasses.asdict(cfg)
    return json.loads(json.dumps(raw, default=enc))


def config_hash(cfg: PipelineConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    return config_from_dict(data)


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))


def toy_config(seed: int = 0) -> PipelineConfig:
    """Capacity/iteration profile sized for a single-core CPU training run."""
    return PipelineConfig(
        seed=seed,
        dnet=DnetSection(base_channels=16, max_channels=64, latent_dim=128,
                         phase1_iterations=200, phase2_iterations=200),
        lnet=LnetSection(ffc_blocks_per_stage=2, iterations=500),
        enet=EnetSection(up_channels=(32, 16), id_channels=(16, 24, 32, 48, 64, 64),
                        iterations=200),
        sync=SyncSection(base_channels=16, iterations=1500, batch_size=8),
    )
