"""Command-line entry points.

`retalk infer` runs the full edit; `reenact` and `lipsync` expose the partial
pipelines; `train-*` fit individual stages on a toy dataset; `eval` scores a
dataset; `make-toy-data` synthesizes one.  Checkpoints default to
$RETALK_CACHE (or ~/.cache/retalk).
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import click

from .checkpoint import cache_dir
from .config import PipelineConfig, config_hash, load_config, toy_config
from .media_io import load_media, write_video
from .pipeline import evaluate, run_lipsync, run_pipeline, run_reenact, train_stage
from .toydata import generate_toy_dataset, load_toy_dataset
from .training import prepare_dataset


def _config(path: str | None, seed: int) -> PipelineConfig:
    if path:
        return load_config(path)
    return toy_config(seed)


_config_opt = click.option("--config", "config_path", type=click.Path(exists=True),
                           default=None, help="JSON or TOML run config (default: toy profile).")
_seed_opt = click.option("--seed", type=int, default=0, show_default=True,
                         help="Seed for the default toy profile (ignored with --config).")
_ckpt_opt = click.option("--checkpoint-dir", type=click.Path(), default=None,
                         help=f"Checkpoint directory (default: {cache_dir()}).")


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose: int):
    """Audio-driven talking-head editing: reenact, lip-sync, enhance."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--video", required=True, type=click.Path(exists=True))
@click.option("--audio", type=click.Path(exists=True), default=None,
              help="Driving audio WAV (default: sibling .wav of the video).")
@click.option("--out", required=True, type=click.Path())
@click.option("--debug-dir", type=click.Path(), default=None,
              help="Dump per-stage crops, masks and the manifest here.")
@_config_opt
@_seed_opt
@_ckpt_opt
def infer(video, audio, out, debug_dir, config_path, seed, checkpoint_dir):
    """Full pipeline: neutralize, lip-sync to audio, enhance, paste back."""
    cfg = _config(config_path, seed)
    clip, track = load_media(video, audio_path=audio)
    result = run_pipeline(clip, track, cfg, checkpoint_dir=checkpoint_dir,
                          debug_dir=debug_dir)
    write_video(result, out)
    manifest_path = Path(out).with_suffix(".manifest.json")
    manifest_path.write_text(json.dumps(
        {k: result.meta[k] for k in ("stage_manifest", "stage_order",
                                     "providers", "config_hash")}, indent=2))
    click.echo(f"wrote {out} ({len(result.frames)} frames); manifest: {manifest_path}")


@main.command()
@click.option("--video", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@_config_opt
@_seed_opt
@_ckpt_opt
def reenact(video, out, config_path, seed, checkpoint_dir):
    """Expression edit only: write the re-rendered aligned crops."""
    cfg = _config(config_path, seed)
    clip, _ = load_media(video, require_audio=False)
    result = run_reenact(clip, cfg, checkpoint_dir=checkpoint_dir)
    write_video(result, out)
    click.echo(f"wrote {out} (mode={result.meta['mode']})")


@main.command()
@click.option("--video", required=True, type=click.Path(exists=True))
@click.option("--audio", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
@_config_opt
@_seed_opt
@_ckpt_opt
def lipsync(video, audio, out, config_path, seed, checkpoint_dir):
    """Lip-sync to audio without the expression-neutralization stage."""
    cfg = _config(config_path, seed)
    clip, track = load_media(video, audio_path=audio)
    result = run_lipsync(clip, track, cfg, checkpoint_dir=checkpoint_dir)
    write_video(result, out)
    click.echo(f"wrote {out} ({len(result.frames)} frames)")


def _train_command(stage: str, help_text: str):
    @main.command(name=f"train-{stage}", help=help_text)
    @click.option("--data", required=True, type=click.Path(exists=True),
                  help="Toy dataset root (from make-toy-data).")
    @click.option("--resume", is_flag=True, help="Continue from the existing checkpoint.")
    @click.option("--iterations", type=int, default=None,
                  help="Override the configured iteration count.")
    @_config_opt
    @_seed_opt
    @_ckpt_opt
    def _cmd(data, resume, iterations, config_path, seed, checkpoint_dir):
        cfg = _config(config_path, seed)
        clips = prepare_dataset(load_toy_dataset(data))
        path = train_stage(stage, cfg, clips, checkpoint_dir=checkpoint_dir,
                           resume=resume, iterations=iterations)
        click.echo(f"wrote {path} (config {config_hash(cfg)})")

    return _cmd


_train_command("syncnet", "Train the audio-visual sync expert.")
_train_command("dnet", "Train the expression-edit (reenactment) network.")
_train_command("lnet", "Train the audio-conditioned lip inpainter.")
_train_command("enet", "Train the identity-aware enhancer (needs lnet).")


@main.command(name="eval")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--protocol", type=click.Choice(["paired", "unpaired"]),
              default="paired", show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Write the metric report JSON here (default: stdout).")
@_config_opt
@_seed_opt
@_ckpt_opt
def eval_cmd(data, protocol, out, config_path, seed, checkpoint_dir):
    """Score a dataset with the trained pipeline."""
    cfg = _config(config_path, seed)
    samples = load_toy_dataset(data)
    report = evaluate(samples, cfg, protocol=protocol, checkpoint_dir=checkpoint_dir)
    if out:
        report.save(out)
        click.echo(f"wrote {out}")
    else:
        click.echo(report.to_json())


@main.command(name="make-toy-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--clips", type=int, default=10, show_default=True)
@click.option("--seconds", type=float, default=4.0, show_default=True)
@click.option("--size", type=int, default=128, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def make_toy_data(out, clips, seconds, size, seed):
    """Generate a deterministic procedural avatar dataset."""
    dirs = generate_toy_dataset(clips, seconds, seed, out, size=size)
    click.echo(f"wrote {len(dirs)} clips under {out}")


if __name__ == "__main__":
    main()
