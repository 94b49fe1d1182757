"""Frame preprocessing: head-pose gating, face cropping, landmark alignment.

Two image streams are produced per kept frame:

* ``main/``: margin-expanded face crop, unaligned, so head motion survives;
* ``fer/``: face warped onto a fixed five-point template, so only
  expression changes remain.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import FRAME_PATTERN, DatasetManifest, FrameAnnotation, VideoRecord, load_sidecar, read_image, write_image
from .errors import AllFramesRejected, DegenerateBox, DegenerateConfiguration, IoFailure, MalformedAnnotation

log = logging.getLogger(__name__)

KEPT_INDICES_FILE = "kept_indices.json"

DEFAULT_TEMPLATE = ((80.0, 92.0), (144.0, 92.0), (112.0, 128.0), (88.0, 160.0), (136.0, 160.0))
TEMPLATE_CANVAS = 224


class PoseGate(BaseModel):
    model_config = ConfigDict(extra="forbid")

    min_deg: float = -10.0
    max_deg: float = 10.0

    @model_validator(mode="after")
    def _ordered(self):
        if not self.min_deg <= self.max_deg:
            raise ValueError("min_deg must not exceed max_deg")
        return self

    def admits(self, ann: FrameAnnotation) -> bool:
        lo, hi = self.min_deg, self.max_deg
        return lo <= ann.yaw <= hi and lo <= ann.pitch <= hi and lo <= ann.roll <= hi


class AlignmentTemplate(BaseModel):
    """Canonical landmark positions on a 224x224 canvas."""

    model_config = ConfigDict(extra="forbid")

    points: tuple[tuple[float, float], ...] = DEFAULT_TEMPLATE

    @model_validator(mode="after")
    def _five(self):
        if len(self.points) != 5:
            raise ValueError("template needs exactly 5 points")
        return self

    def scaled(self, out_size: int) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64) * (out_size / TEMPLATE_CANVAS)


class PreprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    margin: float = 0.25
    out_size: int = 224
    template: AlignmentTemplate = Field(default_factory=AlignmentTemplate)

    @model_validator(mode="after")
    def _check(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.out_size < 1:
            raise ValueError("out_size must be positive")
        return self


def filter_by_pose(annotations, gate: PoseGate | None = None) -> list[int]:
    """Frame indices whose yaw, pitch and roll all lie in the closed gate."""
    gate = gate or PoseGate()
    if not annotations:
        raise ValueError("no annotations to filter")
    kept = [a.frame_index for a in annotations if gate.admits(a)]
    if not kept:
        raise AllFramesRejected(
            f"all {len(annotations)} frames outside [{gate.min_deg}, {gate.max_deg}] deg"
        )
    return kept


def _square_region(bbox, margin):
    x, y, w, h = bbox
    if not (w > 0 and h > 0):
        raise DegenerateBox(f"bbox has non-positive size: w={w}, h={h}")
    side = max(w, h) * (1.0 + 2.0 * margin)
    cx, cy = x + w / 2.0, y + h / 2.0
    x0 = int(math.floor(cx - side / 2.0 + 0.5))
    y0 = int(math.floor(cy - side / 2.0 + 0.5))
    n = max(1, int(round(side)))
    return x0, y0, n


def crop_face(frame: np.ndarray, bbox, margin: float = 0.25, out_size: int = 224) -> np.ndarray:
    """Square crop around ``bbox`` grown by ``margin * max(w, h)`` per side.

    Parts of the region outside the frame are black.  The crop is resized to
    ``out_size`` x ``out_size`` with bilinear interpolation.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    x0, y0, n = _square_region(bbox, margin)
    H, W = frame.shape[:2]
    canvas = np.zeros((n, n) + frame.shape[2:], dtype=frame.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + n, W), min(y0 + n, H)
    if sx1 > sx0 and sy1 > sy0:
        canvas[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = frame[sy0:sy1, sx0:sx1]
    if n == out_size:
        return canvas
    return cv2.resize(canvas, (out_size, out_size), interpolation=cv2.INTER_LINEAR)


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * R(theta) @ p + (tx, ty)``."""

    scale: float
    theta: float
    tx: float
    ty: float

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array(
            [[self.scale * c, -self.scale * s, self.tx], [self.scale * s, self.scale * c, self.ty]]
        )

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        m = self.matrix
        return p @ m[:, :2].T + m[:, 2]

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c, s = math.cos(-self.theta), math.sin(-self.theta)
        tx = -inv_scale * (c * self.tx - s * self.ty)
        ty = -inv_scale * (s * self.tx + c * self.ty)
        return SimilarityTransform(inv_scale, -self.theta, tx, ty)

    def residual(self, src, dst) -> float:
        return float(np.sum((self.apply(src) - np.asarray(dst, dtype=np.float64)) ** 2))


def estimate_similarity(src, dst) -> SimilarityTransform:
    """Least-squares similarity mapping ``src`` onto ``dst`` (Umeyama, 1991)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError(f"expected two (N, 2) point sets, got {src.shape} and {dst.shape}")
    n = len(src)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    sc, dc = src - mu_s, dst - mu_d
    var_s = np.sum(sc**2) / n
    if var_s < 1e-12:
        raise DegenerateConfiguration("source points are coincident")
    cov = dc.T @ sc / n
    U, S, Vt = np.linalg.svd(cov)
    d = np.ones(2)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[1] = -1.0
    R = U @ np.diag(d) @ Vt
    scale = float(np.sum(S * d) / var_s)
    if scale <= 0:
        raise DegenerateConfiguration("no orientation-preserving similarity fits these points")
    t = mu_d - scale * R @ mu_s
    return SimilarityTransform(scale, math.atan2(R[1, 0], R[0, 0]), float(t[0]), float(t[1]))


def align_face(frame: np.ndarray, landmarks, template: AlignmentTemplate | None = None, out_size: int = 224):
    """Warp ``frame`` so that ``landmarks`` land on the template points."""
    template = template or AlignmentTemplate()
    tf = estimate_similarity(landmarks, template.scaled(out_size))
    return cv2.warpAffine(
        frame,
        tf.matrix,
        (out_size, out_size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )


def _check_inside(ann: FrameAnnotation, shape, video_id):
    H, W = shape[:2]
    lm = ann.landmark_array
    if (lm < 0).any() or (lm[:, 0] > W).any() or (lm[:, 1] > H).any():
        raise MalformedAnnotation(
            f"{video_id}: landmarks of frame {ann.frame_index} fall outside the {W}x{H} frame"
        )


def preprocess_video(record: VideoRecord, out_dir, gate: PoseGate | None = None, cfg: PreprocessConfig | None = None):
    """Gate, crop and align one video.  Returns the kept frame indices.

    Writes ``kept_indices.json`` plus ``main/`` and ``fer/`` image folders
    named after the original frame index.
    """
    cfg = cfg or PreprocessConfig()
    out_dir = Path(out_dir)
    anns = load_sidecar(record)
    kept = filter_by_pose(anns, gate)
    main_dir, fer_dir = out_dir / "main", out_dir / "fer"
    try:
        main_dir.mkdir(parents=True, exist_ok=True)
        fer_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(str(e)) from e
    for i in kept:
        ann = anns[i]
        frame = read_image(record.frame_file(i))
        _check_inside(ann, frame.shape, record.video_id)
        name = FRAME_PATTERN.format(i)
        write_image(crop_face(frame, ann.bbox, cfg.margin, cfg.out_size), main_dir / name)
        write_image(align_face(frame, ann.landmark_array, cfg.template, cfg.out_size), fer_dir / name)
    write_kept_indices(out_dir, kept)
    return kept


def write_kept_indices(video_dir, kept) -> None:
    try:
        (Path(video_dir) / KEPT_INDICES_FILE).write_text(json.dumps([int(i) for i in kept]) + "\n")
    except OSError as e:
        raise IoFailure(str(e)) from e


def read_kept_indices(video_dir) -> list[int]:
    path = Path(video_dir) / KEPT_INDICES_FILE
    if not path.is_file():
        return []
    return [int(i) for i in json.loads(path.read_text())]


def preprocess_dataset(manifest: DatasetManifest, out_root, gate=None, cfg=None, skip_rejected=False) -> dict:
    """Preprocess every video; returns a retention report.

    A video whose frames are all rejected raises :class:`AllFramesRejected`
    unless ``skip_rejected`` is set, in which case it is listed in the report.
    """
    gate = gate or PoseGate()
    out_root = Path(out_root)
    videos, rejected = {}, []
    total = kept_total = 0
    for rec in manifest:
        total += rec.frame_count
        vdir = out_root / rec.video_id
        try:
            kept = preprocess_video(rec, vdir, gate, cfg)
        except AllFramesRejected:
            if not skip_rejected:
                raise
            log.warning("%s: every frame rejected by the pose gate", rec.video_id)
            rejected.append(rec.video_id)
            vdir.mkdir(parents=True, exist_ok=True)
            write_kept_indices(vdir, [])
            videos[rec.video_id] = {"kept": 0, "total": rec.frame_count}
            continue
        kept_total += len(kept)
        videos[rec.video_id] = {"kept": len(kept), "total": rec.frame_count}
    return {
        "gate": gate.model_dump(),
        "frames_total": total,
        "frames_kept": kept_total,
        "retention": kept_total / total if total else 0.0,
        "rejected_videos": rejected,
        "videos": videos,
    }
