"""Slice sampling over the pose-gated frame sequence."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .data import FRAME_PATTERN, read_image
from .errors import ShapeMismatch, VideoTooShort


class Window(str, enum.Enum):
    full = "full"
    second_half = "second_half"


class SliceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_slices: int = 2
    slice_len: int = 16
    window: Window = Window.second_half
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.num_slices < 1 or self.slice_len < 1:
            raise ValueError("num_slices and slice_len must be at least 1")
        return self


@dataclass(frozen=True)
class Slice:
    video_id: str
    start: int
    indices: tuple[int, ...]
    """Positions in the kept-frame sequence (not raw frame numbers)."""

    def frames(self, kept) -> list[int]:
        return [int(kept[i]) for i in self.indices]


@dataclass
class SliceBatch:
    main_frames: np.ndarray
    fer_frames: np.ndarray

    def __post_init__(self):
        if self.main_frames.shape[:2] != self.fer_frames.shape[:2]:
            raise ShapeMismatch(
                f"stream shapes disagree: {self.main_frames.shape} vs {self.fer_frames.shape}"
            )

    @property
    def shape(self):
        return self.main_frames.shape[:2]


def valid_starts(n_kept: int, spec: SliceSpec) -> range:
    last = n_kept - spec.slice_len
    if last < 0:
        return range(0)
    if spec.window == Window.second_half and n_kept // 2 <= last:
        return range(n_kept // 2, last + 1)
    return range(0, last + 1)


def as_generator(rng_state) -> np.random.Generator:
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def sample_slices(kept, spec: SliceSpec, rng_state, video_id: str = "") -> list[Slice]:
    """Draw ``spec.num_slices`` runs of consecutive kept frames.

    ``rng_state`` is a seed (int or sequence) or a ``numpy.random.Generator``;
    a generator is advanced in place.  Slices may overlap.
    """
    starts = valid_starts(len(kept), spec)
    if len(starts) == 0:
        raise VideoTooShort(len(kept), spec.slice_len, video_id or None)
    rng = as_generator(rng_state)
    chosen = rng.integers(starts.start, starts.stop, size=spec.num_slices)
    return [
        Slice(video_id, int(s), tuple(range(int(s), int(s) + spec.slice_len))) for s in chosen
    ]


def _load_stream(directory: Path, frame_ids) -> np.ndarray:
    return np.stack([read_image(directory / FRAME_PATTERN.format(i)) for i in frame_ids])


def assemble_slice_batch(slices, main_dir, fer_dir, kept=None) -> SliceBatch:
    """Read the frames referenced by ``slices`` as float32 arrays in [0, 1].

    Shapes are ``(num_slices, slice_len, H, W, 3)``.  Slice positions are
    mapped to raw frame numbers through ``kept``; without it they are taken
    to be frame numbers already.
    """
    main_dir, fer_dir = Path(main_dir), Path(fer_dir)
    main, fer = [], []
    for s in slices:
        ids = s.frames(kept) if kept is not None else list(s.indices)
        main.append(_load_stream(main_dir, ids))
        fer.append(_load_stream(fer_dir, ids))
    return SliceBatch(
        np.stack(main).astype(np.float32) / 255.0,
        np.stack(fer).astype(np.float32) / 255.0,
    )
