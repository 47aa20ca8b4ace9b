"""End-to-end orchestration: reenact, inpaint, enhance, composite.

The stage order is fixed and every run logs it into the output clip's meta,
so a manifest can be replayed and checked.  All model randomness flows from
the config seed; inference itself is deterministic.
"""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

from . import checkpoint as ckpt
from .compositing import enhance_teeth, parse_face, paste_back
from .config import PipelineConfig, config_hash
from .dnet import reenact_video
from .enet import HR
from .errors import DependencyMissing, EmptyDataset, MissingCheckpoint, StageFailure
from .face_geometry import (CoeffSequence, align_face, builtin_template,
                            load_template, replace_expression, smooth_landmarks)
from .lnet import CROP
from .media_io import AudioTrack, VideoClip, compute_mel, mel_window, mel_window_count
from .metrics import cpbd, fid_from_embeddings
from .providers import BicubicUpscale, ProviderRegistry, default_registry
from .sync_expert import SyncNet, lse_metrics
from .training import (PreparedClip, init_dnet_state, init_enet_state,
                       init_lnet_state, init_sync_state, lnet_infer_clip,
                       load_stage, save_stage, train_dnet, train_enet,
                       train_lnet, train_syncnet)

log = logging.getLogger(__name__)

STAGE_ORDER = (
    "crop_align",
    "coefficients",
    "replace_expression",
    "dnet_reenact",
    "smooth_realign",
    "lnet_inpaint",
    "enet_enhance",
    "teeth",
    "paste_back",
)

STAGE_FILES = {"dnet": "dnet.ckpt", "lnet": "lnet.ckpt",
               "enet": "enet.ckpt", "sync": "syncnet.ckpt"}


def checkpoint_path(stage: str, checkpoint_dir: str | Path | None = None) -> Path:
    root = Path(checkpoint_dir) if checkpoint_dir else ckpt.cache_dir()
    return root / STAGE_FILES[stage]


@dataclass
class PipelineModels:
    """All networks plus the provider bundle for one run."""

    config: PipelineConfig
    registry: ProviderRegistry
    dnet: torch.nn.Module
    lnet: torch.nn.Module
    enet: torch.nn.Module
    id_encoder: torch.nn.Module
    syncnet: SyncNet | None = None


def build_models(config: PipelineConfig) -> PipelineModels:
    """Freshly initialized (untrained) networks under the config seed."""
    dnet = init_dnet_state(config.dnet, config.seed)["model"]
    lnet = init_lnet_state(config.lnet, config.seed)["model"]
    enet_state = init_enet_state(config.enet, config.seed)
    return PipelineModels(config=config, registry=default_registry(config.seed),
                          dnet=dnet, lnet=lnet, enet=enet_state["enet"],
                          id_encoder=enet_state["id_encoder"])


def load_models(config: PipelineConfig, checkpoint_dir: str | Path | None = None,
                stages: tuple = ("dnet", "lnet", "enet")) -> PipelineModels:
    """Build networks and restore the requested stage checkpoints.

    A missing archive raises MissingCheckpoint naming the stage.  A syncnet
    checkpoint is restored opportunistically when present (used by eval).
    """
    models = build_models(config)
    for stage in stages:
        archive = ckpt.load_checkpoint(checkpoint_path(stage, checkpoint_dir), stage=stage)
        if stage == "dnet":
            ckpt.restore_module(archive, "model", models.dnet)
        elif stage == "lnet":
            ckpt.restore_module(archive, "model", models.lnet)
        elif stage == "enet":
            ckpt.restore_module(archive, "enet", models.enet)
            ckpt.restore_module(archive, "id_encoder", models.id_encoder)
    sync_path = checkpoint_path("sync", checkpoint_dir)
    if sync_path.exists():
        archive = ckpt.load_checkpoint(sync_path, stage="sync")
        models.syncnet = SyncNet(base=config.sync.base_channels)
        ckpt.restore_module(archive, "model", models.syncnet)
        models.syncnet.eval()
    for m in (models.dnet, models.lnet, models.enet, models.id_encoder):
        m.eval()
    return models


@contextmanager
def _stage(name: str, manifest: list):
    record = {"stage": name}
    try:
        yield record
    except (MissingCheckpoint, StageFailure):
        raise
    except Exception as exc:
        raise StageFailure(name, str(exc)) from exc
    manifest.append(record)


def _resolve_template(config: PipelineConfig):
    base = load_template(config.template_path) if config.template_path else builtin_template("neutral")
    return base


def _stabilize(coeffs: CoeffSequence, config: PipelineConfig) -> CoeffSequence:
    """Blend original expression toward the template by interpolation_ratio.

    ratio 0 keeps the original expression exactly; ratio 1 (the default) is
    full template replacement.
    """
    template = _resolve_template(config)
    ratio = 1.0 if config.interpolation_ratio is None else float(config.interpolation_ratio)
    if ratio == 0.0:
        return coeffs.copy()
    replaced = replace_expression(coeffs, template)
    if ratio == 1.0:
        return replaced
    out = coeffs.copy()
    out.expression[:] = (1.0 - ratio) * coeffs.expression + ratio * replaced.expression
    return out


def _mel_windows(audio: AudioTrack, n_frames: int, fps: float) -> np.ndarray:
    mel = compute_mel(audio)
    count = mel_window_count(mel, n_frames, fps)
    return np.stack([mel_window(mel, i, fps).values for i in range(count)]).astype(np.float32)


def run_pipeline(video: VideoClip, audio: AudioTrack, config: PipelineConfig,
                 models: PipelineModels | None = None,
                 checkpoint_dir: str | Path | None = None,
                 debug_dir: str | Path | None = None) -> VideoClip:
    """Full edit: neutralize, lip-sync to the audio, enhance, paste back."""
    if models is None:
        models = load_models(config, checkpoint_dir)
    registry = models.registry
    manifest: list[dict] = []
    n = len(video.frames)
    upscale = BicubicUpscale(scale=HR // CROP)

    with _stage("crop_align", manifest) as rec:
        track = registry.landmarks.track(video)
        aligned = [align_face(video.frames[i], track.points[i], crop_size=256)
                   for i in range(n)]
        crops256 = np.stack([c for c, _ in aligned])
        rec["frames"] = n

    with _stage("coefficients", manifest) as rec:
        coeffs = registry.coefficients.coefficients(video)
        rec["provider"] = registry.coefficients.provider_id

    with _stage("replace_expression", manifest) as rec:
        driven = _stabilize(coeffs, config)
        rec["template"] = _resolve_template(config).label
        rec["ratio"] = 1.0 if config.interpolation_ratio is None else config.interpolation_ratio

    with _stage("dnet_reenact", manifest) as rec:
        crop_clip = VideoClip(frames=crops256, fps=video.fps, meta={})
        reenacted = reenact_video(models.dnet, crop_clip, driven,
                                  mode=config.reenact_mode)
        rec["mode"] = config.reenact_mode
        rec["reference_indices"] = reenacted.meta["reference_indices"]

    with _stage("smooth_realign", manifest) as rec:
        track96 = smooth_landmarks(registry.landmarks.track(reenacted))
        aligned96 = [align_face(reenacted.frames[i], track96.points[i], crop_size=CROP)
                     for i in range(n)]
        crops96 = np.stack([c for c, _ in aligned96])
        # identity references come from the original video in the same 96-space
        orig96 = np.stack([
            cv2.warpAffine(crops256[i], aligned96[i][1].matrix, (CROP, CROP),
                           flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
            for i in range(n)
        ])
        lms96 = np.stack([aligned96[i][1].apply_points(track96.points[i])
                          for i in range(n)])
        rec["crop"] = CROP

    with _stage("lnet_inpaint", manifest) as rec:
        windows = _mel_windows(audio, n, video.fps)
        synced = lnet_infer_clip(models.lnet, crops96, windows)
        rec["windows"] = len(windows)

    with _stage("enet_enhance", manifest) as rec:
        enhanced = np.empty((n, HR, HR, 3), np.uint8)
        with torch.no_grad():
            for i in range(n):
                low = torch.from_numpy(
                    synced[i].astype(np.float32).transpose(2, 0, 1) / 255.0)[None]
                id_ref = torch.from_numpy(
                    upscale.restore(orig96[i]).astype(np.float32).transpose(2, 0, 1) / 255.0)[None]
                id_vec = models.id_encoder(id_ref)
                hr = models.enet.enhance(low, id_vec)[0].clamp(0, 1)
                enhanced[i] = np.rint(hr.numpy().transpose(1, 2, 0) * 255.0).astype(np.uint8)
        rec["resolution"] = HR

    with _stage("teeth", manifest) as rec:
        scale = HR // CROP
        masks = []
        for i in range(n):
            mask, region = parse_face(enhanced[i], lms96[i] * scale, parser=registry.parser)
            enhanced[i] = enhance_teeth(enhanced[i], region, registry.restoration)
            masks.append(mask)
        rec["restoration"] = registry.restoration.provider_id

    with _stage("paste_back", manifest) as rec:
        out_frames = np.empty_like(video.frames)
        for i in range(n):
            total = aligned96[i][1].scaled(scale).compose(aligned[i][1])
            out_frames[i] = paste_back(video.frames[i], enhanced[i], total,
                                       masks[i], levels=config.blend_levels)
        rec["blend_levels"] = config.blend_levels

    if debug_dir is not None:
        _dump_debug(Path(debug_dir), crops256, crops96, synced, enhanced, masks, manifest)

    meta = dict(video.meta)
    meta.update({
        "stage_manifest": manifest,
        "stage_order": list(STAGE_ORDER),
        "providers": registry.manifest(),
        "config_hash": config_hash(config),
    })
    return VideoClip(frames=out_frames, fps=video.fps, meta=meta)


def _dump_debug(root: Path, crops256, crops96, synced, enhanced, masks, manifest):
    root.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(root / "crop256.png"), cv2.cvtColor(crops256[0], cv2.COLOR_RGB2BGR))
    cv2.imwrite(str(root / "crop96.png"), cv2.cvtColor(crops96[0], cv2.COLOR_RGB2BGR))
    cv2.imwrite(str(root / "lnet96.png"), cv2.cvtColor(synced[0], cv2.COLOR_RGB2BGR))
    cv2.imwrite(str(root / "enet384.png"), cv2.cvtColor(enhanced[0], cv2.COLOR_RGB2BGR))
    cv2.imwrite(str(root / "mask.png"), (masks[0] * 255).astype(np.uint8))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def run_reenact(video: VideoClip, config: PipelineConfig,
                models: PipelineModels | None = None,
                checkpoint_dir: str | Path | None = None) -> VideoClip:
    """Expression edit only: aligned crops re-rendered under the template."""
    if models is None:
        models = load_models(config, checkpoint_dir, stages=("dnet",))
    registry = models.registry
    track = registry.landmarks.track(video)
    crops = np.stack([align_face(video.frames[i], track.points[i], crop_size=256)[0]
                      for i in range(len(video.frames))])
    coeffs = registry.coefficients.coefficients(video)
    driven = _stabilize(coeffs, config)
    out = reenact_video(models.dnet, VideoClip(frames=crops, fps=video.fps, meta={}),
                        driven, mode=config.reenact_mode)
    out.meta["config_hash"] = config_hash(config)
    return out


def run_lipsync(video: VideoClip, audio: AudioTrack, config: PipelineConfig,
                models: PipelineModels | None = None,
                checkpoint_dir: str | Path | None = None) -> VideoClip:
    """Direct lip-sync without the expression-neutralization stage."""
    if models is None:
        models = load_models(config, checkpoint_dir, stages=("lnet", "enet"))
    registry = models.registry
    n = len(video.frames)
    upscale = BicubicUpscale(scale=HR // CROP)
    track = smooth_landmarks(registry.landmarks.track(video))
    aligned = [align_face(video.frames[i], track.points[i], crop_size=CROP)
               for i in range(n)]
    crops96 = np.stack([c for c, _ in aligned])
    lms96 = np.stack([aligned[i][1].apply_points(track.points[i]) for i in range(n)])
    windows = _mel_windows(audio, n, video.fps)
    synced = lnet_infer_clip(models.lnet, crops96, windows)
    scale = HR // CROP
    out_frames = np.empty_like(video.frames)
    with torch.no_grad():
        for i in range(n):
            low = torch.from_numpy(
                synced[i].astype(np.float32).transpose(2, 0, 1) / 255.0)[None]
            id_ref = torch.from_numpy(
                upscale.restore(crops96[i]).astype(np.float32).transpose(2, 0, 1) / 255.0)[None]
            hr = models.enet.enhance(low, models.id_encoder(id_ref))[0].clamp(0, 1)
            frame = np.rint(hr.numpy().transpose(1, 2, 0) * 255.0).astype(np.uint8)
            mask, region = parse_face(frame, lms96[i] * scale, parser=registry.parser)
            frame = enhance_teeth(frame, region, registry.restoration)
            out_frames[i] = paste_back(video.frames[i], frame,
                                       aligned[i][1].scaled(scale), mask,
                                       levels=config.blend_levels)
    meta = dict(video.meta)
    meta["config_hash"] = config_hash(config)
    return VideoClip(frames=out_frames, fps=video.fps, meta=meta)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricReport:
    """Headline metrics plus per-clip breakdowns for one evaluation run."""

    metrics: dict
    config_hash: str
    per_clip: list

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "config_hash": self.config_hash,
                "per_clip": self.per_clip}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path


def _clip_lse(frames: np.ndarray, fps: float, audio: AudioTrack,
              registry: ProviderRegistry, syncnet: SyncNet):
    clip = VideoClip(frames=frames, fps=fps, meta={})
    track = registry.landmarks.track(clip)
    crops = np.stack([align_face(frames[i], track.points[i], crop_size=CROP)[0]
                      for i in range(len(frames))])
    return lse_metrics(crops, compute_mel(audio), syncnet, fps=fps)


def evaluate(dataset: list, config: PipelineConfig, protocol: str = "paired",
             models: PipelineModels | None = None,
             checkpoint_dir: str | Path | None = None,
             pipeline_fn=None, syncnet: SyncNet | None = None,
             registry: ProviderRegistry | None = None) -> MetricReport:
    """Run the pipeline over a dataset and score the outputs.

    paired drives each clip with its own audio; unpaired drives clip i with
    clip (i+1 mod n)'s audio, so no clip is ever paired with itself.  FID and
    CPBD are computed on full frames; lip-sync metrics need a sync expert and
    are reported as NaN without one.
    """
    if not dataset:
        raise EmptyDataset("evaluation dataset is empty")
    if protocol not in ("paired", "unpaired"):
        raise ValueError(f"unknown protocol {protocol!r}")
    n = len(dataset)
    if protocol == "unpaired" and n < 2:
        raise EmptyDataset("unpaired protocol needs at least two clips")
    if pipeline_fn is None:
        if models is None:
            models = load_models(config, checkpoint_dir)
        fixed = models

        def pipeline_fn(video, audio):
            return run_pipeline(video, audio, config, models=fixed)

        syncnet = syncnet or fixed.syncnet
        registry = registry or fixed.registry
    registry = registry or default_registry(config.seed)

    per_clip = []
    out_embeds, src_embeds = [], []
    cpbd_values = []
    lse_d_values, lse_c_values = [], []
    for i, sample in enumerate(dataset):
        j = i if protocol == "paired" else (i + 1) % n
        audio = dataset[j].audio
        out = pipeline_fn(sample.clip, audio)
        out_embeds.append(registry.features.embed_frames(out.frames))
        src_embeds.append(registry.features.embed_frames(sample.clip.frames))
        clip_cpbd = float(np.mean([cpbd(f) for f in out.frames]))
        cpbd_values.append(clip_cpbd)
        entry = {"clip_index": i, "audio_index": j, "clip": sample.name,
                 "audio": dataset[j].name, "cpbd": clip_cpbd}
        if syncnet is not None:
            report = _clip_lse(out.frames, out.fps, audio, registry, syncnet)
            entry["lse_d"] = report.lse_d
            entry["lse_c"] = report.lse_c
            lse_d_values.append(report.lse_d)
            lse_c_values.append(report.lse_c)
        per_clip.append(entry)

    fid_value = fid_from_embeddings(np.concatenate(out_embeds), np.concatenate(src_embeds))
    metrics = {
        "fid": float(fid_value),
        "cpbd": float(np.mean(cpbd_values)),
        "lse_d": float(np.mean(lse_d_values)) if lse_d_values else float("nan"),
        "lse_c": float(np.mean(lse_c_values)) if lse_c_values else float("nan"),
    }
    return MetricReport(metrics=metrics, config_hash=config_hash(config),
                        per_clip=per_clip)


# ---------------------------------------------------------------------------
# training entry point


def train_stage(stage: str, config: PipelineConfig, clips: list[PreparedClip],
                checkpoint_dir: str | Path | None = None, resume: bool = False,
                iterations: int | None = None) -> Path:
    """Train one stage and write its checkpoint archive.

    Dependencies: the lip-sync inpainter needs a sync-expert checkpoint when
    its sync weight is nonzero; the enhancer always needs the inpainter.
    """
    stage = {"syncnet": "sync"}.get(stage, stage)
    if stage not in STAGE_FILES:
        raise ValueError(f"unknown stage {stage!r}")
    registry = default_registry(config.seed)
    chash = config_hash(config)
    path = checkpoint_path(stage, checkpoint_dir)
    seed = config.seed

    if stage == "sync":
        state = init_sync_state(config.sync, seed)
        if resume:
            load_stage(state, "sync", path)
        state = train_syncnet(clips, config.sync, seed, state, iterations)
    elif stage == "dnet":
        state = init_dnet_state(config.dnet, seed)
        if resume:
            load_stage(state, "dnet", path)
        state = train_dnet(clips, config.dnet, seed, registry.features, state, iterations)
    elif stage == "lnet":
        sync_model = None
        if config.lnet.lambda_sync != 0.0:
            sync_path = checkpoint_path("sync", checkpoint_dir)
            if not sync_path.exists():
                raise DependencyMissing(
                    "lnet training needs a syncnet checkpoint when lambda_sync > 0; "
                    f"none found at {sync_path}")
            archive = ckpt.load_checkpoint(sync_path, stage="sync")
            sync_model = SyncNet(base=config.sync.base_channels)
            ckpt.restore_module(archive, "model", sync_model)
        state = init_lnet_state(config.lnet, seed)
        if resume:
            load_stage(state, "lnet", path)
        state = train_lnet(clips, config.lnet, seed, registry.features, sync_model,
                           state, iterations)
    else:  # enet
        lnet_path = checkpoint_path("lnet", checkpoint_dir)
        if not lnet_path.exists():
            raise DependencyMissing(
                f"enet training needs an lnet checkpoint; none found at {lnet_path}")
        archive = ckpt.load_checkpoint(lnet_path, stage="lnet")
        lnet_model = init_lnet_state(config.lnet, seed)["model"]
        ckpt.restore_module(archive, "model", lnet_model)
        state = init_enet_state(config.enet, seed)
        if resume:
            load_stage(state, "enet", path)
        state = train_enet(clips, config.enet, seed, registry.features,
                           registry.identity, lnet_model,
                           BicubicUpscale(scale=HR // CROP), state, iterations)
    return save_stage(state, stage, path, chash)
