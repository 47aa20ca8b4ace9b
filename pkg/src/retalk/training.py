"""Stage trainers and clip preparation.

Every trainer derives its per-step randomness from (seed, stage, step), so a
resumed run replays the exact sample/augmentation sequence of an untouched
run.  Models are constructed under a seeded torch RNG, which also makes
ablation pairs (e.g. with/without the sync term) start from identical
weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import DnetSection, EnetSection, LnetSection, SyncSection
from .dnet import DNet, DNetConfig, coeff_window, dnet_loss
from .enet import ENet, ENetConfig, EnhanceBatch, IdentityEncoder, degrade, DegradationConfig, enet_objective
from .errors import EmptyDataset
from .face_geometry import CoeffSequence, LandmarkTrack, align_face
from .layers import PatchDiscriminator, perceptual_loss
from .lnet import LNet, LNetConfig, LNetInput, lnet_loss, T_FRAMES, CROP
from .media_io import MelSpectrogram, compute_mel, mel_window
from .sync_expert import SyncNet, sync_probability, video_window
from .toydata import ToySample, sample_coefficients, sample_landmarks

_STAGE_IDS = {"sync": 1, "dnet": 2, "lnet": 3, "enet": 4}


def step_rng(seed: int, stage: str, step: int) -> np.random.Generator:
    key = (_STAGE_IDS[stage], step)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


# ---------------------------------------------------------------------------
# clip preparation


@dataclass
class PreparedClip:
    """A toy clip with alignment, crops and mel windows precomputed."""

    sample: ToySample
    landmarks: LandmarkTrack
    coeffs: CoeffSequence
    crops96: np.ndarray  # (T,96,96,3) uint8
    mel: MelSpectrogram
    mel_windows: np.ndarray  # (T-4, 80, 16) float32

    @property
    def n_frames(self) -> int:
        return len(self.crops96)

    @property
    def fps(self) -> float:
        return self.sample.clip.fps

    def crop(self, index: int, size: int) -> np.ndarray:
        crop, _ = align_face(self.sample.clip.frames[index],
                             self.landmarks.points[index], crop_size=size)
        return crop

    def transform(self, index: int, size: int):
        _, tf = align_face(self.sample.clip.frames[index],
                           self.landmarks.points[index], crop_size=size)
        return tf


def prepare_clip(sample: ToySample) -> PreparedClip:
    landmarks = sample_landmarks(sample)
    coeffs = sample_coefficients(sample)
    crops = np.stack([
        align_face(sample.clip.frames[i], landmarks.points[i], crop_size=CROP)[0]
        for i in range(len(sample.clip.frames))
    ])
    mel = compute_mel(sample.audio)
    n_windows = len(sample.clip.frames) - T_FRAMES + 1
    windows = np.stack([
        mel_window(mel, i, sample.clip.fps).values for i in range(n_windows)
    ]).astype(np.float32)
    return PreparedClip(sample=sample, landmarks=landmarks, coeffs=coeffs,
                        crops96=crops, mel=mel, mel_windows=windows)


def prepare_dataset(samples: list[ToySample]) -> list[PreparedClip]:
    if not samples:
        raise EmptyDataset("no clips to prepare")
    return [prepare_clip(s) for s in samples]


def _frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """uint8 (...,H,W,3) -> float32 (...,3,H,W) in [0,1]."""
    arr = frames.astype(np.float32) / 255.0
    return torch.from_numpy(np.moveaxis(arr, -1, -3).copy())


def _f(value: torch.Tensor | float) -> float:
    """Detached python float for history logging."""
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


# ---------------------------------------------------------------------------
# sync expert


def init_sync_state(cfg: SyncSection, seed: int) -> dict:
    torch.manual_seed(seed * 4 + _STAGE_IDS["sync"])
    model = SyncNet(base=cfg.base_channels)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    return {"model": model, "opt": opt, "step": 0, "history": []}


def _sample_sync_pair(clip: PreparedClip, rng: np.random.Generator):
    """Return (video window, mel window, label); label 1 = in sync."""
    t_max = clip.n_frames - T_FRAMES
    n_mel = len(clip.mel_windows)
    t = int(rng.integers(0, t_max + 1))
    in_sync = bool(rng.integers(0, 2))
    if in_sync:
        a_idx = min(t, n_mel - 1)
    else:
        offsets = [o for o in range(-15, 16) if abs(o) >= 5 and 0 <= t + o < n_mel]
        a_idx = t + int(offsets[rng.integers(0, len(offsets))])
    return video_window(clip.crops96, t), clip.mel_windows[a_idx], float(in_sync)


def train_syncnet(clips: list[PreparedClip], cfg: SyncSection, seed: int,
                  state: dict | None = None, iterations: int | None = None) -> dict:
    """Contrastive margin training on in-sync vs offset pairs.

    Positives are pulled toward cosine 1, negatives pushed below the margin;
    unlike a log loss on the clamped cosine this keeps gradients bounded, so
    a single hard pair cannot blow up an update.
    """
    if not clips:
        raise EmptyDataset("sync training needs at least one clip")
    state = state or init_sync_state(cfg, seed)
    model, opt = state["model"], state["opt"]
    total = cfg.iterations if iterations is None else iterations
    model.train()
    for step in range(state["step"], total):
        rng = step_rng(seed, "sync", step)
        vids, mels, labels = [], [], []
        for _ in range(cfg.batch_size):
            clip = clips[int(rng.integers(0, len(clips)))]
            v, m, y = _sample_sync_pair(clip, rng)
            vids.append(v)
            mels.append(m)
            labels.append(y)
        v = model.embed_video(torch.from_numpy(np.stack(vids)))
        a = model.embed_audio(torch.from_numpy(np.stack(mels))[:, None])
        cos = (v * a).sum(dim=1)
        y = torch.tensor(labels)
        loss = (y * (1.0 - cos) + (1.0 - y) * torch.relu(cos - cfg.margin)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        state["history"].append(_f(loss))
        state["step"] = step + 1
    return state


def sync_accuracy(model: SyncNet, clips: list[PreparedClip], n_pairs: int = 200,
                  seed: int = 123) -> float:
    """Balanced in-sync/offset classification accuracy at threshold 0.5."""
    rng = np.random.default_rng(seed)
    model.eval()
    correct = 0
    with torch.no_grad():
        for _ in range(n_pairs):
            clip = clips[int(rng.integers(0, len(clips)))]
            v, m, y = _sample_sync_pair(clip, rng)
            ve = model.embed_video(torch.from_numpy(v)[None])
            ae = model.embed_audio(torch.from_numpy(m)[None, None])
            p = float(sync_probability(ve, ae)[0])
            correct += int((p > 0.5) == bool(y))
    return correct / n_pairs


# ---------------------------------------------------------------------------
# dnet


def init_dnet_state(cfg: DnetSection, seed: int) -> dict:
    torch.manual_seed(seed * 4 + _STAGE_IDS["dnet"])
    model = DNet(DNetConfig(base_channels=cfg.base_channels, max_channels=cfg.max_channels,
                            latent_dim=cfg.latent_dim, window=cfg.window))
    warm = list(model.mapping.parameters()) + list(model.warping.parameters())
    opt1 = torch.optim.Adam(warm, lr=cfg.lr)
    opt2 = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    return {"model": model, "opt1": opt1, "opt2": opt2, "step": 0,
            "history": {"phase": [], "l_dw": [], "l_de": []}}


def train_dnet(clips: list[PreparedClip], cfg: DnetSection, seed: int, features,
               state: dict | None = None, iterations: int | None = None) -> dict:
    """Self-reconstruction: warm up mapping+warping, then train everything.

    Phase 1 (first phase1_iterations steps) optimizes only mapping+warping on
    the warp loss; phase 2 optimizes all parameters on warp + edit losses.
    """
    if not clips:
        raise EmptyDataset("dnet training needs at least one clip")
    state = state or init_dnet_state(cfg, seed)
    model = state["model"]
    total = cfg.phase1_iterations + cfg.phase2_iterations if iterations is None else iterations
    model.train()
    for step in range(state["step"], total):
        rng = step_rng(seed, "dnet", step)
        clip = clips[int(rng.integers(0, len(clips)))]
        t = int(rng.integers(0, clip.n_frames))
        s = int(rng.integers(0, clip.n_frames))
        source = _frames_to_tensor(clip.crop(s, model.cfg.crop_size))[None]
        target = _frames_to_tensor(clip.crop(t, model.cfg.crop_size))[None]
        window = torch.from_numpy(coeff_window(clip.coeffs, t, model.cfg.window))[None]
        phase = 1 if step < cfg.phase1_iterations else 2
        if phase == 1:
            z = model.mapping(window)
            flow, warped, _ = model.warping(source, z)
            f_t = features.features(target)
            f_w = features.features(warped)
            l_dw = perceptual_loss(f_t, f_w)
            loss = l_dw
            losses = {"l_dw": l_dw, "l_de": torch.zeros(())}
            opt = state["opt1"]
        else:
            out = model(source, window)
            losses = dnet_loss(out, target, features,
                               lambda_c=cfg.lambda_c, lambda_s=cfg.lambda_s)
            loss = losses["l_dw"] + losses["l_de"]
            opt = state["opt2"]
        opt.zero_grad()
        loss.backward()
        opt.step()
        state["history"]["phase"].append(phase)
        state["history"]["l_dw"].append(_f(losses["l_dw"]))
        state["history"]["l_de"].append(_f(losses["l_de"]))
        state["step"] = step + 1
    return state


# ---------------------------------------------------------------------------
# lnet


def init_lnet_state(cfg: LnetSection, seed: int) -> dict:
    torch.manual_seed(seed * 4 + _STAGE_IDS["lnet"])
    model = LNet(LNetConfig(enc_channels=tuple(cfg.enc_channels),
                            dec_channels=tuple(cfg.dec_channels),
                            ffc_blocks_per_stage=cfg.ffc_blocks_per_stage,
                            attention_blocks=cfg.attention_blocks))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    return {"model": model, "opt": opt, "step": 0,
            "history": {"total": [], "l1": [], "perceptual": [], "sync": []}}


def _sample_lnet_window(clip: PreparedClip, rng: np.random.Generator):
    t_max = clip.n_frames - T_FRAMES - (T_FRAMES - 1)
    t = int(rng.integers(0, max(t_max, 1)))
    target = clip.crops96[t : t + T_FRAMES]
    pose_start = int(rng.integers(0, clip.n_frames - T_FRAMES + 1))
    pose_ref = clip.crops96[pose_start : pose_start + T_FRAMES]
    ref_idx = rng.integers(0, clip.n_frames, size=T_FRAMES)
    reference = clip.crops96[ref_idx]
    mel = clip.mel_windows[t : t + T_FRAMES]
    return target, pose_ref, reference, mel


def train_lnet(clips: list[PreparedClip], cfg: LnetSection, seed: int, features,
               sync_model: SyncNet | None = None, state: dict | None = None,
               iterations: int | None = None) -> dict:
    """Inpainting training; the sync term is active iff a sync model is given
    and lambda_sync is nonzero."""
    if not clips:
        raise EmptyDataset("lnet training needs at least one clip")
    state = state or init_lnet_state(cfg, seed)
    model, opt = state["model"], state["opt"]
    if sync_model is not None:
        sync_model.eval()
        for p in sync_model.parameters():
            p.requires_grad_(False)
    total = cfg.iterations if iterations is None else iterations
    model.train()
    for step in range(state["step"], total):
        rng = step_rng(seed, "lnet", step)
        tgt, pose, ref, mel = [], [], [], []
        for _ in range(cfg.batch_size):
            clip = clips[int(rng.integers(0, len(clips)))]
            t, p_, r, m = _sample_lnet_window(clip, rng)
            tgt.append(t)
            pose.append(p_)
            ref.append(r)
            mel.append(m)
        target = _frames_to_tensor(np.stack(tgt))
        inp = LNetInput.build(target, _frames_to_tensor(np.stack(pose)),
                              _frames_to_tensor(np.stack(ref)),
                              torch.from_numpy(np.stack(mel))[:, :, None])
        pred = model(inp)
        losses = lnet_loss(pred, target, inp.mel, features, sync_model,
                           lambda_l1=cfg.lambda_l1, lambda_p=cfg.lambda_p,
                           lambda_sync=cfg.lambda_sync)
        opt.zero_grad()
        losses["total"].backward()
        opt.step()
        for k in ("total", "l1", "perceptual"):
            state["history"][k].append(_f(losses[k]))
        state["history"]["sync"].append(_f(losses.get("sync", 0.0)))
        state["step"] = step + 1
    return state


def lnet_infer_clip(model: LNet, crops96: np.ndarray, mel_windows: np.ndarray,
                    reference: np.ndarray | None = None,
                    pose_ref: np.ndarray | None = None) -> np.ndarray:
    """Run the inpainter over a whole clip in 5-frame windows.

    reference / pose_ref default to the input crops themselves (the
    whole-input-as-reference inference policy).
    """
    t_total = len(crops96)
    reference = crops96 if reference is None else reference
    pose_ref = crops96 if pose_ref is None else pose_ref
    out = crops96.copy()
    model.eval()
    starts = list(range(0, t_total - T_FRAMES + 1, T_FRAMES))
    max_start = len(mel_windows) - T_FRAMES
    if starts and starts[-1] != t_total - T_FRAMES:
        starts.append(t_total - T_FRAMES)
    with torch.no_grad():
        for t in starts:
            m = min(t, max_start)
            target = _frames_to_tensor(crops96[t : t + T_FRAMES])[None]
            inp = LNetInput.build(
                target,
                _frames_to_tensor(pose_ref[t : t + T_FRAMES])[None],
                _frames_to_tensor(reference[t : t + T_FRAMES])[None],
                torch.from_numpy(mel_windows[m : m + T_FRAMES])[None, :, None],
            )
            pred = model(inp)[0].clamp(0, 1).numpy()
            frames = np.moveaxis(pred, 1, -1)
            out[t : t + T_FRAMES] = np.rint(frames * 255.0).astype(np.uint8)
    return out


# ---------------------------------------------------------------------------
# enet


def init_enet_state(cfg: EnetSection, seed: int) -> dict:
    torch.manual_seed(seed * 4 + _STAGE_IDS["enet"])
    enet_cfg = ENetConfig(up_channels=tuple(cfg.up_channels),
                          id_channels=tuple(cfg.id_channels))
    enet = ENet(enet_cfg)
    id_enc = IdentityEncoder(enet_cfg)
    disc = PatchDiscriminator()
    gen_params = list(enet.parameters()) + list(id_enc.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=cfg.lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr)
    return {"enet": enet, "id_encoder": id_enc, "disc": disc,
            "opt_g": opt_g, "opt_d": opt_d, "step": 0,
            "history": {"gen": [], "disc": [], "l1": []}}


def prepare_enhance_batch(clip: PreparedClip, rng: np.random.Generator,
                          lnet_model: LNet, restoration,
                          quality_range: tuple[int, int] = (30, 95)) -> EnhanceBatch:
    """Degrade a restored high-res window, re-lipsync it, pick the center.

    This is the domain-gap protocol: the E-Net input is always the frozen
    L-Net's output on degraded frames, never a raw frame.
    """
    t_max = clip.n_frames - T_FRAMES - (T_FRAMES - 1)
    t = int(rng.integers(0, max(t_max, 1)))
    window96 = clip.crops96[t : t + T_FRAMES]
    hi = np.stack([restoration.restore(f) for f in window96])
    quality = int(rng.integers(quality_range[0], quality_range[1] + 1))
    hi_t = _frames_to_tensor(hi)
    with torch.no_grad():
        deg = degrade(hi_t, DegradationConfig(jpeg_quality=quality))
        pose_start = int(rng.integers(0, clip.n_frames - T_FRAMES + 1))
        pose_hi = np.stack([restoration.restore(f)
                            for f in clip.crops96[pose_start : pose_start + T_FRAMES]])
        pose_deg = degrade(_frames_to_tensor(pose_hi),
                           DegradationConfig(jpeg_quality=quality))
        mel = torch.from_numpy(clip.mel_windows[t : t + T_FRAMES])[None, :, None]
        inp = LNetInput.build(deg[None], pose_deg[None], deg[None], mel)
        lnet_model.eval()
        o_lr = lnet_model(inp)[0]
    center = T_FRAMES // 2
    id_idx = int(rng.integers(0, clip.n_frames))
    id_ref = _frames_to_tensor(restoration.restore(clip.crops96[id_idx]))[None]
    return EnhanceBatch(i_gt=hi_t[center][None], id_ref=id_ref,
                        o_lr=o_lr[center][None].detach(), source="lnet-degraded")


def train_enet(clips: list[PreparedClip], cfg: EnetSection, seed: int, features,
               identity_provider, lnet_model: LNet, restoration,
               state: dict | None = None, iterations: int | None = None) -> dict:
    """Adversarial 4x enhancement training over a frozen L-Net."""
    if not clips:
        raise EmptyDataset("enet training needs at least one clip")
    state = state or init_enet_state(cfg, seed)
    enet, id_enc, disc = state["enet"], state["id_encoder"], state["disc"]
    for p in lnet_model.parameters():
        p.requires_grad_(False)
    total = cfg.iterations if iterations is None else iterations
    for step in range(state["step"], total):
        rng = step_rng(seed, "enet", step)
        clip = clips[int(rng.integers(0, len(clips)))]
        batch = prepare_enhance_batch(clip, rng, lnet_model, restoration,
                                      (cfg.jpeg_quality_min, cfg.jpeg_quality_max))
        id_vec = id_enc(batch.id_ref)
        batch.o_hr = enet.enhance(batch.o_lr, id_vec)
        gen_terms, disc_loss = enet_objective(
            batch, features, identity_provider, disc,
            lambda_l1=cfg.lambda_l1, lambda_p=cfg.lambda_p,
            lambda_adv=cfg.lambda_adv, lambda_id=cfg.lambda_id)
        state["opt_g"].zero_grad()
        gen_terms["total"].backward()
        state["opt_g"].step()
        state["opt_d"].zero_grad()
        disc_loss.backward()
        state["opt_d"].step()
        state["history"]["gen"].append(_f(gen_terms["total"]))
        state["history"]["disc"].append(_f(disc_loss))
        state["history"]["l1"].append(_f(gen_terms["l1"]))
        state["step"] = step + 1
    return state


# ---------------------------------------------------------------------------
# checkpoint plumbing


_STAGE_LAYOUT = {
    "sync": (["model"], ["opt"]),
    "dnet": (["model"], ["opt1", "opt2"]),
    "lnet": (["model"], ["opt"]),
    "enet": (["enet", "id_encoder", "disc"], ["opt_g", "opt_d"]),
}


def save_stage(state: dict, stage: str, path: str | Path, cfg_hash: str) -> Path:
    mod_keys, opt_keys = _STAGE_LAYOUT[stage]
    modules = {k: state[k] for k in mod_keys}
    optimizers = {k: state[k] for k in opt_keys}
    extra = {"history": state["history"]}
    return ckpt.save_checkpoint(path, stage, state["step"], cfg_hash,
                                modules, optimizers, extra)


def load_stage(state: dict, stage: str, path: str | Path) -> dict:
    """Restore a freshly initialized stage state in place from an archive."""
    archive = ckpt.load_checkpoint(path, stage=stage)
    mod_keys, opt_keys = _STAGE_LAYOUT[stage]
    for k in mod_keys:
        ckpt.restore_module(archive, k, state[k])
    for k in opt_keys:
        ckpt.restore_optimizer(archive, k, state[k])
    state["step"] = archive.iteration
    state["history"] = archive.manifest["extra"].get("history", state["history"])
    return state
