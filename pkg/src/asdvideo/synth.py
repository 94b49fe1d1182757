"""Synthetic reaction-video datasets.

Each video shows a schematic face whose head roll and mouth opening oscillate
at a class-specific frequency, so the label can be read off the motion over
time but not off any single frame.  Sidecars carry the exact geometry used for
rendering.  Rendering is pure numpy so output is bit-reproducible for a seed.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import (
    FRAME_PATTERN,
    DatasetManifest,
    FrameAnnotation,
    Label,
    Sense,
    VideoRecord,
    write_image,
    write_manifest,
    write_sidecar,
)
from .errors import InvalidSyntheticSpec, IoFailure

TASTE_STIMULI = ("sucrose", "caffeine", "salt", "citric acid", "quinine")
SMELL_STIMULI = ("cabbage", "peppermint", "garlic", "caramel", "mushroom", "citrus", "vanilla", "fish")

# landmark offsets in face-width units, relative to the face centre
_LANDMARK_OFFSETS = np.array(
    [[-0.25, -0.22], [0.25, -0.22], [0.0, 0.06], [-0.19, 0.31], [0.19, 0.31]]
)
_SKIN = np.array([224.0, 182.0, 150.0])
_DARK = np.array([40.0, 30.0, 30.0])
_MOUTH = np.array([150.0, 40.0, 50.0])


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_subjects: int = 10
    videos_per_subject: int = 3
    frames_per_video: int = 64
    class_motion_frequency: dict[int, float] = Field(default_factory=lambda: {0: 0.05, 1: 2.0})
    image_size: int = 160
    seed: int = 0
    fps: float = 10.0
    face_width: float = 64.0
    roll_amplitude_deg: float = 6.0
    translation_amplitude: float = 6.0
    pose_jitter_deg: float = 5.0
    roll_jitter_deg: float = 1.0
    sense: Sense = Sense.taste

    @model_validator(mode="after")
    def _check(self):
        for name in ("n_subjects", "videos_per_subject", "frames_per_video", "image_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if set(self.class_motion_frequency) != {0, 1}:
            raise ValueError("class_motion_frequency needs exactly the labels 0 and 1")
        f0, f1 = self.class_motion_frequency[0], self.class_motion_frequency[1]
        if f0 == f1:
            raise ValueError("class motion frequencies must differ")
        if min(f0, f1) < 0:
            raise ValueError("frequencies must be non-negative")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if self.pose_jitter_deg < 0 or self.roll_jitter_deg < 0:
            raise ValueError("pose jitter must be non-negative")
        margin = self.face_width * 0.8 + self.translation_amplitude + 1
        if 2 * margin >= self.image_size:
            raise ValueError("face does not fit into the frame")
        return self

    @classmethod
    def parse(cls, data: dict) -> "SyntheticSpec":
        from pydantic import ValidationError

        try:
            return cls.model_validate(data)
        except ValidationError as e:
            err = e.errors()[0]
            loc = ".".join(str(x) for x in err["loc"])
            raise InvalidSyntheticSpec(f"{loc + ': ' if loc else ''}{err['msg']}") from e


def _rotation(deg: float) -> np.ndarray:
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def _ellipse_alpha(xx, yy, cx, cy, ax, ay, roll_deg):
    """Anti-aliased coverage of a rotated ellipse (roughly one-pixel ramp)."""
    a = math.radians(roll_deg)
    c, s = math.cos(a), math.sin(a)
    dx, dy = xx - cx, yy - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    d = np.sqrt((u / ax) ** 2 + (v / ay) ** 2)
    return np.clip((1.0 - d) * min(ax, ay) + 0.5, 0.0, 1.0)


def _paint(img, alpha, color):
    img += alpha[..., None] * (color - img)


def face_geometry(cx, cy, width, roll_deg):
    """Landmarks (5, 2) and axis-aligned bbox of the rendered face."""
    lms = np.array([cx, cy]) + (_LANDMARK_OFFSETS * width) @ _rotation(roll_deg).T
    ax, ay = 0.5 * width, 0.62 * width
    a = math.radians(roll_deg)
    hw = math.sqrt((ax * math.cos(a)) ** 2 + (ay * math.sin(a)) ** 2)
    hh = math.sqrt((ax * math.sin(a)) ** 2 + (ay * math.cos(a)) ** 2)
    return lms, (cx - hw, cy - hh, 2 * hw, 2 * hh)


def render_face(size, cx, cy, width, roll_deg, mouth_open, background):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((size, size, 3))
    img[:] = background
    img += (yy / size * 30.0)[..., None]
    lms, _ = face_geometry(cx, cy, width, roll_deg)
    _paint(img, _ellipse_alpha(xx, yy, cx, cy, 0.5 * width, 0.62 * width, roll_deg), _SKIN)
    eye_r = 0.07 * width
    eye_h = eye_r * (0.25 + 0.75 * mouth_open)
    for ex, ey in lms[:2]:
        _paint(img, _ellipse_alpha(xx, yy, ex, ey, eye_r, eye_h, roll_deg), _DARK)
    nose_r = 0.045 * width
    _paint(img, _ellipse_alpha(xx, yy, lms[2, 0], lms[2, 1], nose_r, nose_r, 0.0), _DARK * 2)
    mx, my = (lms[3] + lms[4]) / 2
    half = np.linalg.norm(lms[4] - lms[3]) / 2
    opening = max(0.6, 0.02 * width + mouth_open * 0.2 * width)
    _paint(img, _ellipse_alpha(xx, yy, mx, my, half, opening, roll_deg), _MOUTH)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _video_frames(spec: SyntheticSpec, label: int, rng: np.random.Generator):
    freq = spec.class_motion_frequency[label]
    phase = rng.uniform(0, 2 * math.pi)
    mouth_phase = phase + rng.uniform(-0.5, 0.5)
    background = np.full(3, 90.0)
    width = spec.face_width * rng.uniform(0.95, 1.05)
    c0 = spec.image_size / 2 + rng.uniform(-3, 3, size=2)
    jitter, roll_jitter = spec.pose_jitter_deg, spec.roll_jitter_deg
    for t in range(spec.frames_per_video):
        tau = 2 * math.pi * freq * t / spec.fps
        s = math.sin(tau + phase)
        cx = c0[0] + spec.translation_amplitude * s
        cy = c0[1] + 0.5 * spec.translation_amplitude * math.cos(tau + phase)
        roll = spec.roll_amplitude_deg * s + (rng.normal(0, roll_jitter) if roll_jitter else 0.0)
        yaw = rng.normal(0, jitter) if jitter else 0.0
        pitch = rng.normal(0, jitter) if jitter else 0.0
        mouth = 0.5 + 0.5 * math.sin(tau + mouth_phase)
        img = render_face(spec.image_size, cx, cy, width, roll, mouth, background)
        lms, bbox = face_geometry(cx, cy, width, roll)
        ann = FrameAnnotation(
            frame_index=t,
            bbox=tuple(float(v) for v in bbox),
            landmarks=[(float(x), float(y)) for x, y in lms],
            yaw=float(yaw),
            pitch=float(pitch),
            roll=float(roll),
        )
        yield img, ann


def generate_synthetic(spec: SyntheticSpec, out_dir) -> tuple[DatasetManifest, Path]:
    """Write frames, sidecars and ``manifest.jsonl`` under ``out_dir``.

    Subjects alternate NT/ASD so that labels are balanced.  Returns the
    manifest and the manifest path.
    """
    out_dir = Path(out_dir)
    stimuli = TASTE_STIMULI if spec.sense == Sense.taste else SMELL_STIMULI
    rng = np.random.default_rng(spec.seed)
    records = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for si in range(spec.n_subjects):
            label = si % 2
            subject_id = f"S{si:03d}"
            for vi in range(spec.videos_per_subject):
                video_id = f"{subject_id}_V{vi:02d}"
                vdir = out_dir / "videos" / video_id
                fdir = vdir / "frames"
                fdir.mkdir(parents=True, exist_ok=True)
                for old in fdir.glob("frame_*.png"):
                    old.unlink()
                vrng = np.random.default_rng(rng.integers(2**63))
                anns = []
                for img, ann in _video_frames(spec, label, vrng):
                    write_image(img, fdir / FRAME_PATTERN.format(ann.frame_index))
                    anns.append(ann)
                sidecar = write_sidecar(anns, vdir / "annotations.jsonl")
                records.append(
                    VideoRecord(
                        video_id=video_id,
                        subject_id=subject_id,
                        label=Label(label),
                        sense=spec.sense,
                        stimulus=stimuli[vi % len(stimuli)],
                        frames_path=fdir,
                        frame_count=spec.frames_per_video,
                        fps=spec.fps,
                        sidecar_path=sidecar,
                    )
                )
    except OSError as e:
        if isinstance(e, IoFailure):
            raise
        raise IoFailure(str(e)) from e
    manifest = DatasetManifest(records=records)
    path = write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest, path
