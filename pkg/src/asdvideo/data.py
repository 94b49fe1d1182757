"""Dataset manifests, per-frame annotation sidecars and frame files.

A manifest is a JSON-lines file, one :class:`VideoRecord` per line.  Paths
inside it are stored relative to the manifest's directory.  Each record points
to a directory of pre-extracted frames (``frame_000000.png`` ...) and to a
sidecar JSON-lines file holding one :class:`FrameAnnotation` per frame.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .errors import (
    DuplicateVideoId,
    FrameCoverageGap,
    IoFailure,
    MalformedAnnotation,
    MissingFile,
    MissingFrameFile,
    MissingSidecar,
    SchemaViolation,
)

SCHEMA_VERSION = 1
FRAME_PATTERN = "frame_{:06d}.png"
MANIFEST_FIELDS = (
    "video_id",
    "subject_id",
    "label",
    "sense",
    "stimulus",
    "frames_path",
    "frame_count",
    "fps",
    "sidecar_path",
)


class Label(enum.IntEnum):
    NT = 0
    ASD = 1


class Sense(str, enum.Enum):
    taste = "taste"
    smell = "smell"


class VideoRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    video_id: str
    subject_id: str
    label: Label
    sense: Sense
    stimulus: str
    frames_path: Path
    frame_count: int
    fps: float
    sidecar_path: Path

    @field_validator("video_id", "subject_id")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("must be a non-empty string")
        return v

    @field_validator("label", mode="before")
    @classmethod
    def _strict_label(cls, v):
        if isinstance(v, bool) or v not in (0, 1):
            raise ValueError("label must be 0 (NT) or 1 (ASD)")
        return v

    @field_validator("frame_count")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("frame_count must be non-negative")
        return v

    @field_validator("fps")
    @classmethod
    def _positive_fps(cls, v):
        if not (v > 0 and math.isfinite(v)):
            raise ValueError("fps must be a positive finite number")
        return v

    def frame_file(self, index: int) -> Path:
        return self.frames_path / FRAME_PATTERN.format(index)


class FrameAnnotation(BaseModel):
    """Face box, five landmarks and head pose for one frame.

    Landmark order: left eye, right eye, nose tip, left mouth corner,
    right mouth corner.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    frame_index: int
    bbox: tuple[float, float, float, float]
    landmarks: list[tuple[float, float]]
    yaw: float
    pitch: float
    roll: float

    @model_validator(mode="after")
    def _check(self):
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        _, _, w, h = self.bbox
        if not (w > 0 and h > 0):
            raise ValueError("bbox width and height must be positive")
        if len(self.landmarks) != 5:
            raise ValueError(f"expected 5 landmark points, got {len(self.landmarks)}")
        values = [*self.bbox, self.yaw, self.pitch, self.roll]
        values += [c for p in self.landmarks for c in p]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("non-finite value in annotation")
        return self

    @property
    def landmark_array(self) -> np.ndarray:
        return np.asarray(self.landmarks, dtype=np.float64)

    def to_json(self) -> str:
        return json.dumps(
            {
                "frame_index": self.frame_index,
                "bbox": list(self.bbox),
                "landmarks": [list(p) for p in self.landmarks],
                "yaw": self.yaw,
                "pitch": self.pitch,
                "roll": self.roll,
            }
        )


@dataclass
class DatasetManifest:
    records: list[VideoRecord] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict[str, VideoRecord]:
        return {r.video_id: r for r in self.records}

    def subjects(self) -> list[tuple[str, int]]:
        """Unique (subject_id, label) pairs in first-seen order."""
        seen: dict[str, int] = {}
        for r in self.records:
            prev = seen.setdefault(r.subject_id, int(r.label))
            if prev != int(r.label):
                raise SchemaViolation(
                    f"subject {r.subject_id!r} has videos with both labels", field="label"
                )
        return list(seen.items())

    def sidecar_paths(self) -> dict[str, Path]:
        return {r.video_id: r.sidecar_path for r in self.records}


def _resolve(base: Path, p: Path) -> Path:
    return p if p.is_absolute() else Path(os.path.normpath(base / p))


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Read and validate a JSON-lines manifest.

    Relative ``frames_path``/``sidecar_path`` entries are resolved against the
    manifest's directory.  With ``check_files`` the sidecar must exist and the
    frame directory must hold exactly ``frame_count`` frame files.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    base = path.parent
    records: list[VideoRecord] = []
    seen: set[str] = set()
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailure(str(e)) from e

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaViolation(f"invalid JSON: {e.msg}", line=lineno) from e
        if not isinstance(raw, dict):
            raise SchemaViolation("record must be a JSON object", line=lineno)
        missing = [f for f in MANIFEST_FIELDS if f not in raw]
        if missing:
            raise SchemaViolation("missing field", field=missing[0], line=lineno)
        try:
            rec = VideoRecord.model_validate(raw)
        except ValidationError as e:
            err = e.errors()[0]
            loc = ".".join(str(x) for x in err["loc"]) or None
            raise SchemaViolation(err["msg"], field=loc, line=lineno) from e
        if rec.video_id in seen:
            raise DuplicateVideoId(rec.video_id, line=lineno)
        seen.add(rec.video_id)
        rec = rec.model_copy(
            update={
                "frames_path": _resolve(base, rec.frames_path),
                "sidecar_path": _resolve(base, rec.sidecar_path),
            }
        )
        if check_files:
            if not rec.sidecar_path.is_file():
                raise MissingSidecar(f"line {lineno}: sidecar not found: {rec.sidecar_path}")
            n_frames = count_frame_files(rec.frames_path)
            if n_frames != rec.frame_count:
                raise SchemaViolation(
                    f"frame_count={rec.frame_count} but {n_frames} frame files present",
                    field="frame_count",
                    line=lineno,
                )
        records.append(rec)
    return DatasetManifest(records=records)


def _relative(p: Path, base: Path) -> str:
    try:
        return os.path.relpath(p, base)
    except ValueError:
        return str(p)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    for r in manifest.records:
        d = {
            "video_id": r.video_id,
            "subject_id": r.subject_id,
            "label": int(r.label),
            "sense": r.sense.value,
            "stimulus": r.stimulus,
            "frames_path": _relative(r.frames_path.resolve(), base),
            "frame_count": r.frame_count,
            "fps": r.fps,
            "sidecar_path": _relative(r.sidecar_path.resolve(), base),
        }
        lines.append(json.dumps(d))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as e:
        raise IoFailure(str(e)) from e
    return path


def count_frame_files(frames_dir: Path) -> int:
    if not frames_dir.is_dir():
        return 0
    return sum(1 for p in frames_dir.iterdir() if p.name.startswith("frame_") and p.suffix == ".png")


def load_sidecar(record: VideoRecord) -> list[FrameAnnotation]:
    """Annotations for every frame of ``record``, sorted by frame index."""
    path = Path(record.sidecar_path)
    if not path.is_file():
        raise MissingSidecar(f"sidecar not found for {record.video_id}: {path}")
    anns: dict[int, FrameAnnotation] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            ann = FrameAnnotation.model_validate_json(line)
        except ValidationError as e:
            raise MalformedAnnotation(f"{path}:{lineno}: {e.errors()[0]['msg']}") from e
        if ann.frame_index in anns:
            raise MalformedAnnotation(f"{path}:{lineno}: duplicate frame_index {ann.frame_index}")
        anns[ann.frame_index] = ann

    for i in range(record.frame_count):
        if i not in anns:
            raise FrameCoverageGap(i)
    extra = sorted(i for i in anns if i >= record.frame_count)
    if extra:
        raise MalformedAnnotation(
            f"{path}: frame_index {extra[0]} beyond frame_count {record.frame_count}"
        )
    return [anns[i] for i in range(record.frame_count)]


def write_sidecar(annotations, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(a.to_json() + "\n" for a in annotations), encoding="utf-8")
    except OSError as e:
        raise IoFailure(str(e)) from e
    return path


def read_image(path) -> np.ndarray:
    """RGB uint8 array of shape (H, W, 3)."""
    path = Path(path)
    if not path.is_file():
        raise MissingFrameFile(f"frame file not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(array: np.ndarray, path) -> None:
    try:
        Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(path, format="PNG")
    except OSError as e:
        raise IoFailure(str(e)) from e
