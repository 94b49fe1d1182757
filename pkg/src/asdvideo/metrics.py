"""Per-video aggregation, binarization and accuracy/F1 reporting.

ASD (label 1) is the positive class throughout.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

from .errors import EmptyPredictionList, EmptyRecords, OutOfRangeProbability

THRESHOLD = 0.5


def aggregate_video(slice_probs) -> float:
    """Mean ASD probability over slices.

    Accepts ``(p_nt, p_asd)`` pairs or bare ASD probabilities.
    """
    probs = [float(p[1]) if hasattr(p, "__len__") else float(p) for p in slice_probs]
    if not probs:
        raise EmptyPredictionList("no slice predictions to aggregate")
    return math.fsum(probs) / len(probs)


def binarize(prob: float, threshold: float = THRESHOLD) -> int:
    """1 (ASD) if ``prob >= threshold`` else 0; a tie goes to ASD."""
    if not (0.0 <= prob <= 1.0):
        raise OutOfRangeProbability(f"probability {prob} outside [0, 1]")
    return 1 if prob >= threshold else 0


@dataclass
class PredictionRecord:
    video_id: str
    slice_probs: list[list[float]]
    prob_asd: float
    predicted: int
    label: int
    fold_index: int
    subject_id: str = ""
    slice_starts: list[int] = field(default_factory=list)
    slice_frames: list[list[int]] = field(default_factory=list)

    @classmethod
    def from_slices(cls, video_id, slice_probs, label, fold_index, **kw):
        p = aggregate_video(slice_probs)
        return cls(
            video_id=video_id,
            slice_probs=[[float(a), float(b)] for a, b in slice_probs],
            prob_asd=p,
            predicted=binarize(p),
            label=int(label),
            fold_index=int(fold_index),
            **kw,
        )

    @property
    def correct(self) -> bool:
        return self.predicted == self.label


@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def summary(self) -> dict:
        return {**asdict(self), "n": self.total, "accuracy": self.accuracy, "f1": self.f1}


def confusion(records) -> Confusion:
    c = Confusion()
    for r in records:
        if r.predicted == 1:
            if r.label == 1:
                c.tp += 1
            else:
                c.fp += 1
        elif r.label == 1:
            c.fn += 1
        else:
            c.tn += 1
    return c


@dataclass
class EvalReport:
    records: list[PredictionRecord]
    overall: Confusion
    per_fold: dict[int, Confusion]
    config: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def accuracy(self) -> float:
        return self.overall.accuracy

    @property
    def f1(self) -> float:
        return self.overall.f1

    def to_dict(self) -> dict:
        return {
            "metrics": self.overall.summary(),
            "per_fold": {str(k): v.summary() for k, v in sorted(self.per_fold.items())},
            "seed": self.seed,
            "config": self.config,
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        records = [PredictionRecord(**r) for r in d["records"]]
        rep = compute_metrics(records, config=d.get("config", {}), seed=d.get("seed"))
        return rep

    def summary_lines(self) -> list[str]:
        lines = [f"videos: {self.overall.total}", f"accuracy: {self.accuracy:.4f}", f"f1: {self.f1:.4f}"]
        c = self.overall
        lines.append(f"TP={c.tp} FP={c.fp} TN={c.tn} FN={c.fn}")
        if len(self.per_fold) > 1:
            for k, v in sorted(self.per_fold.items()):
                lines.append(f"fold {k}: accuracy {v.accuracy:.4f} f1 {v.f1:.4f} (n={v.total})")
        return lines


def compute_metrics(records, config: dict | None = None, seed: int | None = None) -> EvalReport:
    records = list(records)
    if not records:
        raise EmptyRecords("no prediction records")
    by_fold = defaultdict(list)
    for r in records:
        by_fold[r.fold_index].append(r)
    return EvalReport(
        records=records,
        overall=confusion(records),
        per_fold={k: confusion(v) for k, v in by_fold.items()},
        config=config or {},
        seed=seed,
    )
