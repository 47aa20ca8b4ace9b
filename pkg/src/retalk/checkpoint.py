"""Checkpoint archives.

One zip file per checkpoint: `manifest.json` (format version, stage,
iteration, config hash, blob names) plus one .npy blob per tensor.  Model
and optimizer tensors share the format; archives are written with fixed
timestamps and sorted entries so identical states produce identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import MissingCheckpoint

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def cache_dir() -> Path:
    root = os.environ.get("RETALK_CACHE")
    if root:
        return Path(root)
    return Path.home() / ".cache" / "retalk"


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, np.ndarray]

    @property
    def stage(self) -> str:
        return self.manifest["stage"]

    @property
    def iteration(self) -> int:
        return int(self.manifest["iteration"])


def _module_blobs(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy()
            for k, v in module.state_dict().items()}


def _optimizer_blobs(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict, dict]:
    state = opt.state_dict()
    blobs: dict[str, np.ndarray] = {}
    meta = {"param_groups": state["param_groups"], "state_keys": {}}
    for pid, pstate in state["state"].items():
        keys = {}
        for k, v in pstate.items():
            if isinstance(v, torch.Tensor):
                blobs[f"{prefix}/{pid}/{k}"] = v.detach().cpu().numpy()
                keys[k] = "tensor"
            else:
                keys[k] = v
        meta["state_keys"][str(pid)] = keys
    return blobs, meta


def save_checkpoint(path: str | Path, stage: str, iteration: int, cfg_hash: str,
                    modules: dict[str, torch.nn.Module],
                    optimizers: dict[str, torch.optim.Optimizer] | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs: dict[str, np.ndarray] = {}
    for name, module in modules.items():
        blobs.update(_module_blobs(module, f"params/{name}"))
    optim_meta = {}
    for name, opt in (optimizers or {}).items():
        oblobs, ometa = _optimizer_blobs(opt, f"optim/{name}")
        blobs.update(oblobs)
        optim_meta[name] = ometa
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "iteration": int(iteration),
        "config_hash": cfg_hash,
        "blobs": sorted(blobs),
        "optimizers": optim_meta,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(blobs):
            buf = io.BytesIO()
            np.save(buf, blobs[name])
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())
    return path


def load_checkpoint(path: str | Path, stage: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(stage or "?", f"no checkpoint at {path}")
    tensors = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in manifest["blobs"]:
            tensors[name] = np.load(io.BytesIO(zf.read(name + ".npy")), allow_pickle=False)
    if stage is not None and manifest.get("stage") != stage:
        raise MissingCheckpoint(
            stage, f"checkpoint at {path} is for stage {manifest.get('stage')!r}")
    return Checkpoint(manifest=manifest, tensors=tensors)


def restore_module(ckpt: Checkpoint, name: str, module: torch.nn.Module) -> None:
    prefix = f"params/{name}/"
    state = {blob[len(prefix):]: torch.from_numpy(arr.copy())
             for blob, arr in ckpt.tensors.items() if blob.startswith(prefix)}
    if not state:
        raise MissingCheckpoint(ckpt.manifest.get("stage", "?"),
                                f"no parameter blobs for module {name!r}")
    module.load_state_dict(state)


def restore_optimizer(ckpt: Checkpoint, name: str, opt: torch.optim.Optimizer) -> None:
    meta = ckpt.manifest.get("optimizers", {}).get(name)
    if meta is None:
        raise MissingCheckpoint(ckpt.manifest.get("stage", "?"),
                                f"no optimizer state for {name!r}")
    state: dict = {"param_groups": meta["param_groups"], "state": {}}
    for pid, keys in meta["state_keys"].items():
        pstate = {}
        for k, v in keys.items():
            if v == "tensor":
                arr = ckpt.tensors[f"optim/{name}/{pid}/{k}"]
                pstate[k] = torch.from_numpy(arr.copy())
            else:
                pstate[k] = v
        state["state"][int(pid)] = pstate
    opt.load_state_dict(state)
