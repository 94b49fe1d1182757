"""Run configuration: one YAML (or JSON) file plus ``--set key=value`` overrides."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError, MissingFile
from .model import ModelConfig
from .preprocess import PoseGate, PreprocessConfig
from .sampling import SliceSpec
from .train import TrainConfig


class Paths(BaseModel):
    model_config = ConfigDict(extra="forbid")

    manifest: Path
    workdir: Path
    checkpoint: Optional[Path] = None

    @property
    def preprocessed(self) -> Path:
        return self.workdir / "preprocessed"

    @property
    def checkpoints(self) -> Path:
        return self.workdir / "checkpoints"

    def fold_checkpoint(self, k: int) -> Path:
        return self.checkpoints / f"fold_{k}"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    paths: Paths
    slice_spec: SliceSpec = Field(default_factory=SliceSpec)
    pose_gate: PoseGate = Field(default_factory=PoseGate)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    report: Optional[Path] = None

    @property
    def report_path(self) -> Path:
        return self.report or self.paths.workdir / "report.json"


def read_mapping(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: cannot parse: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` assignments; values are parsed as YAML scalars."""
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            child = node.setdefault(p, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
            node = child
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def _resolve(base: Path, p):
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else base / p


def validation_message(e: ValidationError) -> str:
    err = e.errors()[0]
    loc = ".".join(str(x) for x in err["loc"])
    return f"{loc}: {err['msg']}" if loc else err["msg"]


def load_run_config(path, overrides=()) -> RunConfig:
    """Parse a run configuration; relative paths are taken from the file's directory."""
    path = Path(path)
    data = apply_overrides(read_mapping(path), overrides)
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{path}: {validation_message(e)}") from e
    base = path.parent
    paths = cfg.paths.model_copy(
        update={
            "manifest": _resolve(base, cfg.paths.manifest),
            "workdir": _resolve(base, cfg.paths.workdir),
            "checkpoint": _resolve(base, cfg.paths.checkpoint),
        }
    )
    cfg = cfg.model_copy(update={"paths": paths, "report": _resolve(base, cfg.report)})
    if cfg.model.max_seq_len < cfg.slice_spec.slice_len + 1:
        raise ConfigError(
            f"model.max_seq_len={cfg.model.max_seq_len} cannot hold slice_len={cfg.slice_spec.slice_len} plus the class token"
        )
    return cfg
