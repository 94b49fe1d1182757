"""Command-line entry point: ``asdvideo synth|preprocess|train|evaluate|predict``.

Exit codes: 0 success, 2 configuration, 3 I/O, 4 pose-gate rejection,
5 non-finite loss, 6 checkpoint mismatch, 7 missing or too-short video.
"""

from __future__ import annotations

import json
import logging
import sys
from functools import wraps
from pathlib import Path

import click

from .config import load_run_config, read_mapping
from .data import load_manifest
from .errors import AsdVideoError, ConfigError, IoFailure, UnknownVideo
from .metrics import PredictionRecord, compute_metrics
from .preprocess import preprocess_dataset
from .synth import SyntheticSpec, generate_synthetic
from .train import (
    FrameStore,
    evaluate_records,
    load_checkpoint,
    make_folds,
    predict_video,
    run_cross_validation,
    train_fold,
    write_report,
)

log = logging.getLogger("asdvideo")


def _exit_on_error(fn):
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except AsdVideoError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(e.exit_code)
        except OSError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(IoFailure.exit_code)

    return wrapper


config_option = click.option(
    "-c", "--config", "config_path", required=True, type=click.Path(dir_okay=False, path_type=Path),
    help="Run configuration (YAML).",
)
set_option = click.option(
    "--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config entry, e.g. train.epochs=5."
)


def _load(config_path, overrides):
    cfg = load_run_config(config_path, overrides)
    try:
        cfg.paths.workdir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"workdir not writable: {e}") from e
    return cfg


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Video-based ASD/NT classifier: data synthesis, preprocessing, training, evaluation."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.argument("spec_file", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output directory (default: 'synthetic' next to the spec file).")
@_exit_on_error
def synth(spec_file, out):
    """Generate a synthetic dataset from SPEC_FILE."""
    spec = SyntheticSpec.parse(read_mapping(spec_file))
    out = out or spec_file.parent / "synthetic"
    manifest, path = generate_synthetic(spec, out)
    n_subjects = len({r.subject_id for r in manifest})
    click.echo(f"{len(manifest)} videos, {n_subjects} subjects")
    click.echo(f"manifest: {path}")


@main.command()
@config_option
@set_option
@click.option("--skip-rejected", is_flag=True, help="Skip videos whose frames all fail the pose gate.")
@_exit_on_error
def preprocess(config_path, overrides, skip_rejected):
    """Pose-gate, crop and align every video in the manifest."""
    cfg = _load(config_path, overrides)
    manifest = load_manifest(cfg.paths.manifest)
    report = preprocess_dataset(manifest, cfg.paths.preprocessed, cfg.pose_gate, cfg.preprocess, skip_rejected)
    out = cfg.paths.workdir / "preprocess_report.json"
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    click.echo(f"retention: {100 * report['retention']:.2f}% ({report['frames_kept']}/{report['frames_total']} frames)")
    if report["rejected_videos"]:
        click.echo(f"rejected videos: {', '.join(report['rejected_videos'])}")
    click.echo(f"report: {out}")


@main.command()
@config_option
@set_option
@click.option("--fold", type=int, default=None, help="Train a single fold.")
@click.option("--all-folds", is_flag=True, help="Run the full cross-validation.")
@_exit_on_error
def train(config_path, overrides, fold, all_folds):
    """Train one fold or all folds."""
    if (fold is None) == (not all_folds):
        raise click.UsageError("give exactly one of --fold N or --all-folds")
    cfg = _load(config_path, overrides)
    manifest = load_manifest(cfg.paths.manifest)
    store = FrameStore(cfg.paths.preprocessed)
    if all_folds:
        report = run_cross_validation(
            manifest, cfg.model, cfg.train, cfg.slice_spec, store, out_dir=cfg.paths.checkpoints
        )
        path = write_report(report, cfg.report_path)
        click.echo("\n".join(report.summary_lines()))
        click.echo(f"checkpoints: {cfg.paths.checkpoints}")
        click.echo(f"report: {path}")
        return
    folds = make_folds(manifest.subjects(), cfg.train.k_folds, cfg.train.seed)
    if not 0 <= fold < folds.k:
        raise ConfigError(f"--fold must be in 0..{folds.k - 1}")
    out = cfg.paths.fold_checkpoint(fold)
    res = train_fold(manifest, folds, fold, cfg.model, cfg.train, cfg.slice_spec, store, out_dir=out)
    click.echo(f"fold {fold}: {len(res.losses)} steps, final loss {res.losses[-1][2]:.4f}")
    click.echo(f"checkpoint: {out}")


def _checkpoint_path(cfg, checkpoint):
    path = checkpoint or cfg.paths.checkpoint
    if path is None:
        raise ConfigError("no checkpoint given (use --checkpoint or paths.checkpoint)")
    return path


@main.command()
@config_option
@set_option
@click.option("--checkpoint", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--split", type=click.Choice(["test", "train", "all"]), default="test", show_default=True)
@_exit_on_error
def evaluate(config_path, overrides, checkpoint, split):
    """Evaluate a checkpoint on its held-out fold (or another split)."""
    cfg = _load(config_path, overrides)
    ckpt = load_checkpoint(_checkpoint_path(cfg, checkpoint), cfg.model)
    manifest = load_manifest(cfg.paths.manifest)
    by_id = manifest.by_id()
    wanted = {
        "test": ckpt.meta.get("test_videos", []),
        "train": ckpt.meta.get("train_videos", []),
        "all": [r.video_id for r in manifest],
    }[split]
    missing = [v for v in wanted if v not in by_id]
    if missing:
        raise UnknownVideo(f"checkpoint refers to videos absent from the manifest: {missing[:3]}")
    store = FrameStore(cfg.paths.preprocessed)
    records = store.usable([by_id[v] for v in wanted], cfg.slice_spec.slice_len)
    fold_index = ckpt.meta.get("fold_index", 0)
    preds = evaluate_records(ckpt.model, records, store, cfg.slice_spec, fold_index, cfg.slice_spec.seed)
    report = compute_metrics(
        preds,
        config={
            "checkpoint": str(ckpt.path),
            "split": split,
            "model": cfg.model.model_dump(mode="json"),
            "slice_spec": cfg.slice_spec.model_dump(mode="json"),
        },
        seed=cfg.slice_spec.seed,
    )
    path = write_report(report, cfg.report_path)
    click.echo(f"accuracy: {report.accuracy:.4f}")
    click.echo(f"f1: {report.f1:.4f}")
    click.echo(f"report: {path}")


@main.command()
@config_option
@set_option
@click.option("--checkpoint", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--video-id", required=True)
@_exit_on_error
def predict(config_path, overrides, checkpoint, video_id):
    """Predict a single preprocessed video."""
    cfg = _load(config_path, overrides)
    ckpt = load_checkpoint(_checkpoint_path(cfg, checkpoint), cfg.model)
    manifest = load_manifest(cfg.paths.manifest, check_files=False)
    rec = manifest.by_id().get(video_id)
    if rec is None:
        raise UnknownVideo(f"video {video_id!r} not in the manifest")
    store = FrameStore(cfg.paths.preprocessed)
    probs, slices, kept = predict_video(ckpt.model, store, video_id, cfg.slice_spec, cfg.slice_spec.seed)
    pred = PredictionRecord.from_slices(
        video_id, probs.tolist(), int(rec.label), ckpt.meta.get("fold_index", -1),
        subject_id=rec.subject_id, slice_starts=[s.start for s in slices],
        slice_frames=[s.frames(kept) for s in slices],
    )
    for s, p in zip(slices, pred.slice_probs):
        click.echo(f"slice start={s.start} frames={s.frames(kept)[0]}..{s.frames(kept)[-1]} p_asd={p[1]:.6f}")
    click.echo(f"p_asd: {pred.prob_asd:.6f}")
    click.echo(f"label: {pred.predicted} ({'ASD' if pred.predicted else 'NT'})")


if __name__ == "__main__":
    main()
