"""Subject-exclusive cross-validation, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import pickle
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator

from .data import DatasetManifest, read_image, FRAME_PATTERN
from .errors import (
    CheckpointMismatch,
    ConfigError,
    InvalidLabel,
    IoFailure,
    MissingFile,
    NonFiniteLoss,
    OutOfRangeStep,
    TooFewSubjects,
    UnknownVideo,
)
from .metrics import EvalReport, PredictionRecord, compute_metrics
from .model import DualStreamClassifier, ModelConfig, build_model
from .preprocess import read_kept_indices, KEPT_INDICES_FILE
from .sampling import SliceBatch, SliceSpec, sample_slices

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base_lr: float = 1e-4
    min_lr: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 40
    k_folds: int = 5
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @model_validator(mode="after")
    def _check(self):
        if not self.min_lr < self.base_lr:
            raise ValueError("min_lr must be below base_lr")
        if self.k_folds < 2:
            raise ValueError("k_folds must be at least 2")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        return self


# --- folds ---------------------------------------------------------------------


@dataclass
class FoldAssignment:
    fold_of: dict[str, int]
    k: int

    def subjects(self, fold_index: int) -> list[str]:
        return [s for s, f in self.fold_of.items() if f == fold_index]

    def split(self, manifest: DatasetManifest, fold_index: int):
        """(train_records, test_records) for one fold."""
        if not 0 <= fold_index < self.k:
            raise ConfigError(f"fold_index {fold_index} outside 0..{self.k - 1}")
        train, test = [], []
        for r in manifest:
            (test if self.fold_of[r.subject_id] == fold_index else train).append(r)
        return train, test

    def to_dict(self):
        return {"k": self.k, "fold_of": dict(sorted(self.fold_of.items()))}


def make_folds(subjects, k: int, seed: int = 0) -> FoldAssignment:
    """Stratified subject-level k-fold partition.

    Subjects of each class are shuffled and dealt round-robin; the dealing
    position carries over between classes so fold sizes stay balanced too.
    """
    if k < 2:
        raise TooFewSubjects(f"k must be at least 2, got {k}")
    labels: dict[str, int] = {}
    for sid, label in subjects:
        if labels.setdefault(sid, int(label)) != int(label):
            raise ConfigError(f"subject {sid!r} listed with two labels")
    by_class = defaultdict(list)
    for sid, label in labels.items():
        by_class[label].append(sid)
    for label, sids in sorted(by_class.items()):
        if len(sids) < k:
            raise TooFewSubjects(f"class {label} has {len(sids)} subjects, fewer than k={k}")
    rng = np.random.default_rng(seed)
    fold_of = {}
    offset = 0
    for label in sorted(by_class):
        sids = sorted(by_class[label])
        rng.shuffle(sids)
        for j, sid in enumerate(sids):
            fold_of[sid] = (offset + j) % k
        offset = (offset + len(sids)) % k
    return FoldAssignment(fold_of, k)


# --- optimisation pieces ---------------------------------------------------------


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to ``min_lr`` at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise OutOfRangeStep(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return cfg.min_lr
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1 + math.cos(math.pi * step / total_steps))


def cross_entropy(probabilities, labels):
    """Mean negative log-probability of the true class."""
    p = torch.as_tensor(probabilities)
    y = torch.as_tensor(labels)
    if p.ndim != 2 or p.shape[1] != 2 or len(y) != len(p):
        raise ValueError(f"expected (B, 2) probabilities and B labels, got {tuple(p.shape)}, {tuple(y.shape)}")
    if not torch.all((y == 0) | (y == 1)):
        raise InvalidLabel(f"labels must be 0 or 1, got {y.tolist()}")
    picked = p.gather(1, y.long().view(-1, 1)).squeeze(1)
    return -torch.log(picked).mean()


def video_nll(logits, labels, num_slices: int):
    """Cross-entropy of slice-averaged probabilities, computed in log space.

    ``logits`` has shape (B * num_slices, 2) with slices of a video adjacent.
    """
    logp = F.log_softmax(logits, dim=-1).view(-1, num_slices, logits.shape[-1])
    log_mean = torch.logsumexp(logp, dim=1) - math.log(num_slices)
    return F.nll_loss(log_mean, torch.as_tensor(labels, dtype=torch.long))


# --- preprocessed frame store ------------------------------------------------------


class FrameStore:
    """In-memory cache of preprocessed ``main``/``fer`` frames per video."""

    def __init__(self, root):
        self.root = Path(root)
        self._kept: dict[str, list[int]] = {}
        self._frames: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def video_dir(self, video_id) -> Path:
        return self.root / video_id

    def kept(self, video_id) -> list[int]:
        if video_id not in self._kept:
            vdir = self.video_dir(video_id)
            if not (vdir / KEPT_INDICES_FILE).is_file():
                raise UnknownVideo(f"video {video_id!r} has not been preprocessed under {self.root}")
            self._kept[video_id] = read_kept_indices(vdir)
        return self._kept[video_id]

    def frames(self, video_id):
        if video_id not in self._frames:
            kept = self.kept(video_id)
            vdir = self.video_dir(video_id)
            main = np.stack([read_image(vdir / "main" / FRAME_PATTERN.format(i)) for i in kept])
            fer = np.stack([read_image(vdir / "fer" / FRAME_PATTERN.format(i)) for i in kept])
            self._frames[video_id] = (main, fer)
        return self._frames[video_id]

    def usable(self, records, slice_len):
        out = []
        for r in records:
            n = len(self.kept(r.video_id))
            if n < slice_len:
                log.warning("skipping %s: %d frames survive the pose gate, need %d", r.video_id, n, slice_len)
                continue
            out.append(r)
        return out

    def slices_uint8(self, video_id, slices):
        """Stacked uint8 frames (S, T, H, W, 3) for both streams."""
        main, fer = self.frames(video_id)
        idx = np.array([s.indices for s in slices])
        return main[idx], fer[idx]

    def batch(self, video_id, slices) -> SliceBatch:
        m, f = self.slices_uint8(video_id, slices)
        return SliceBatch(m.astype(np.float32) / 255.0, f.astype(np.float32) / 255.0)


def video_rng(seed: int, video_id: str) -> np.random.Generator:
    """Per-video generator for evaluation slices, independent of visiting order."""
    return np.random.default_rng([seed, zlib.crc32(video_id.encode())])


# --- checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    path: Path
    model: DualStreamClassifier
    meta: dict


def save_checkpoint(path, model, meta: dict, optimizer=None, step: int = 0) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        torch.save(model.state_dict(), path / "model.pt")
        torch.save(
            {"step": step, "optimizer": optimizer.state_dict() if optimizer else None},
            path / "train_state.pt",
        )
        meta = {"version": CHECKPOINT_VERSION, "model_config": model.cfg.model_dump(mode="json"), **meta}
        (path / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(str(e)) from e
    return path


def load_checkpoint(path, model_cfg: ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint; ``model_cfg`` must match the stored configuration."""
    path = Path(path)
    meta_file = path / "checkpoint.json"
    if not meta_file.is_file():
        raise CheckpointMismatch(f"no checkpoint at {path}")
    meta = json.loads(meta_file.read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {meta.get('version')}")
    stored = ModelConfig.model_validate(meta["model_config"])
    if model_cfg is not None and model_cfg.model_dump(mode="json") != stored.model_dump(mode="json"):
        raise CheckpointMismatch("checkpoint model configuration differs from the run configuration")
    model = DualStreamClassifier(stored)
    try:
        state = torch.load(path / "model.pt", map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except (RuntimeError, OSError, pickle.UnpicklingError) as e:
        raise CheckpointMismatch(f"cannot load parameters from {path}: {e}") from e
    model.eval()
    return Checkpoint(path, model, meta)


# --- training ----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DualStreamClassifier
    losses: list[tuple[int, float, float]] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)


def train_steps(model, records, store: FrameStore, train_cfg: TrainConfig, slice_spec: SliceSpec,
                total_steps: int, rng: np.random.Generator, optimizer=None, log_every: int = 0):
    """Run ``total_steps`` optimizer updates over ``records``.

    Each epoch visits the videos in a fresh random order in batches of
    ``batch_size``; every visit samples new slices.  Returns the optimizer and
    a list of ``(step, lr, loss)``.
    """
    if not records:
        raise ConfigError("no usable training videos")
    if optimizer is None:
        optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=train_cfg.base_lr,
            betas=train_cfg.betas,
            eps=train_cfg.eps,
            weight_decay=train_cfg.weight_decay,
        )
    model.train()
    losses = []
    step = 0
    S = slice_spec.num_slices
    while step < total_steps:
        order = rng.permutation(len(records))
        for b in range(0, len(order), train_cfg.batch_size):
            if step >= total_steps:
                break
            batch = [records[i] for i in order[b : b + train_cfg.batch_size]]
            mains, fers = [], []
            for r in batch:
                slices = sample_slices(store.kept(r.video_id), slice_spec, rng, r.video_id)
                m, f = store.slices_uint8(r.video_id, slices)
                mains.append(m)
                fers.append(f)
            labels = [int(r.label) for r in batch]
            lr = lr_schedule(step, total_steps, train_cfg)
            for g in optimizer.param_groups:
                g["lr"] = lr
            logits = model.forward_logits(np.concatenate(mains), np.concatenate(fers))
            loss = video_nll(logits, labels, S)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"loss={loss.item()} at step {step} (lr={lr:.3g}) on videos "
                    f"{[r.video_id for r in batch]}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append((step, lr, float(loss.item())))
            if log_every and step % log_every == 0:
                log.info("step %d lr %.3g loss %.4f", step, lr, loss.item())
            step += 1
    return optimizer, losses


def steps_per_epoch(n_videos: int, batch_size: int) -> int:
    return max(1, math.ceil(n_videos / batch_size))


def train_fold(manifest: DatasetManifest, folds: FoldAssignment, fold_index: int, model_cfg: ModelConfig,
               train_cfg: TrainConfig, slice_spec: SliceSpec, store: FrameStore, out_dir=None) -> TrainResult:
    """Train on every fold except ``fold_index``; optionally write a checkpoint."""
    train_recs, test_recs = folds.split(manifest, fold_index)
    train_recs = store.usable(train_recs, slice_spec.slice_len)
    test_recs = store.usable(test_recs, slice_spec.slice_len)
    if model_cfg.max_seq_len < slice_spec.slice_len + 1:
        raise ConfigError(f"max_seq_len {model_cfg.max_seq_len} too small for slice_len {slice_spec.slice_len}")
    model = build_model(model_cfg, seed=train_cfg.seed * 1000 + fold_index)
    rng = np.random.default_rng([train_cfg.seed, fold_index])
    total = train_cfg.epochs * steps_per_epoch(len(train_recs), train_cfg.batch_size)
    optimizer, losses = train_steps(model, train_recs, store, train_cfg, slice_spec, total, rng)
    model.eval()
    result = TrainResult(
        model,
        losses,
        train_ids=[r.video_id for r in train_recs],
        test_ids=[r.video_id for r in test_recs],
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        meta = {
            "fold_index": fold_index,
            "folds": folds.to_dict(),
            "train_config": train_cfg.model_dump(mode="json"),
            "slice_spec": slice_spec.model_dump(mode="json"),
            "train_videos": result.train_ids,
            "test_videos": result.test_ids,
        }
        save_checkpoint(out_dir, model, meta, optimizer, step=len(losses))
        write_loss_curve(out_dir / "loss_curve.tsv", losses)
        result.checkpoint = out_dir
    return result


def write_loss_curve(path, losses) -> None:
    lines = ["step\tlr\tloss"] + [f"{s}\t{lr:.10g}\t{loss:.10g}" for s, lr, loss in losses]
    Path(path).write_text("\n".join(lines) + "\n")


def predict_video(model, store: FrameStore, video_id: str, slice_spec: SliceSpec, seed: int):
    """Per-slice probabilities and the slices used, for one video."""
    kept = store.kept(video_id)
    slices = sample_slices(kept, slice_spec, video_rng(seed, video_id), video_id)
    probs = model.predict(store.batch(video_id, slices))
    return probs, slices, kept


def evaluate_records(model, records, store: FrameStore, slice_spec: SliceSpec, fold_index: int, seed: int):
    out = []
    for r in records:
        probs, slices, kept = predict_video(model, store, r.video_id, slice_spec, seed)
        out.append(
            PredictionRecord.from_slices(
                r.video_id,
                probs.tolist(),
                int(r.label),
                fold_index,
                subject_id=r.subject_id,
                slice_starts=[s.start for s in slices],
                slice_frames=[s.frames(kept) for s in slices],
            )
        )
    return out


def run_cross_validation(manifest: DatasetManifest, model_cfg: ModelConfig, train_cfg: TrainConfig,
                         slice_spec: SliceSpec, store: FrameStore, out_dir=None, folds=None) -> EvalReport:
    """Train and test every fold; pooled and per-fold metrics in one report."""
    folds = folds or make_folds(manifest.subjects(), train_cfg.k_folds, train_cfg.seed)
    records = []
    for k in range(folds.k):
        ckpt = Path(out_dir) / f"fold_{k}" if out_dir is not None else None
        res = train_fold(manifest, folds, k, model_cfg, train_cfg, slice_spec, store, ckpt)
        _, test = folds.split(manifest, k)
        test = [r for r in test if r.video_id in set(res.test_ids)]
        fold_recs = evaluate_records(res.model, test, store, slice_spec, k, slice_spec.seed)
        records += fold_recs
        acc = sum(r.correct for r in fold_recs) / max(1, len(fold_recs))
        log.info("fold %d: %d test videos, accuracy %.4f", k, len(fold_recs), acc)
    config = {
        "model": model_cfg.model_dump(mode="json"),
        "train": train_cfg.model_dump(mode="json"),
        "slice_spec": slice_spec.model_dump(mode="json"),
        "folds": folds.to_dict(),
    }
    return compute_metrics(records, config=config, seed=train_cfg.seed)


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise IoFailure(str(e)) from e
    return path


def read_report(path) -> EvalReport:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"report not found: {path}")
    return EvalReport.from_dict(json.loads(path.read_text()))
