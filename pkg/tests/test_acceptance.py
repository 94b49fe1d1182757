"""Acceptance suite: one PASS/FAIL line per criterion, printed as it runs.

Run alone with ``pytest tests/test_acceptance.py -s``.  The end-to-end
cross-validation takes roughly ten minutes on one CPU core.
"""

import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from asdvideo.config import load_run_config, read_mapping
from asdvideo.data import FrameAnnotation, load_manifest
from asdvideo.metrics import PredictionRecord, aggregate_video, binarize, compute_metrics
from asdvideo.model import build_model
from asdvideo.preprocess import (
    DEFAULT_TEMPLATE,
    PoseGate,
    SimilarityTransform,
    estimate_similarity,
    filter_by_pose,
    preprocess_dataset,
)
from asdvideo.synth import SyntheticSpec, generate_synthetic
from asdvideo.train import (
    FrameStore,
    TrainConfig,
    lr_schedule,
    make_folds,
    run_cross_validation,
    train_steps,
)

from .test_model import gradient_check
from .test_train import check_partition

REPO = Path(__file__).resolve().parents[1]
TEMPLATE = np.array(DEFAULT_TEMPLATE)


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def shipped(tmp_path_factory):
    """The shipped synthetic dataset, generated and preprocessed once."""
    root = tmp_path_factory.mktemp("shipped")
    t0 = time.perf_counter()
    spec = SyntheticSpec.parse(read_mapping(REPO / "configs" / "synth.yaml"))
    _, manifest_path = generate_synthetic(spec, root / "synthetic")
    cfg = load_run_config(
        REPO / "configs" / "run.yaml",
        [f"paths.manifest={manifest_path}", f"paths.workdir={root / 'work'}"],
    )
    manifest = load_manifest(cfg.paths.manifest)
    preprocess_dataset(manifest, cfg.paths.preprocessed, cfg.pose_gate, cfg.preprocess)
    return cfg, manifest, FrameStore(cfg.paths.preprocessed), time.perf_counter() - t0


@pytest.mark.slow
def test_synthetic_end_to_end(shipped, verdict):
    cfg, manifest, store, prep_seconds = shipped
    t0 = time.perf_counter()
    report = run_cross_validation(manifest, cfg.model, cfg.train, cfg.slice_spec, store)
    seconds = prep_seconds + time.perf_counter() - t0
    correct = sum(r.correct for r in report.records)
    ok = (
        len(manifest) == 30
        and len(manifest.subjects()) == 10
        and cfg.train.k_folds == 5
        and cfg.train.epochs <= 40
        and len(report.records) == 30
        and report.accuracy >= 0.95
        and seconds <= 20 * 60
    )
    verdict(
        "synthetic end-to-end",
        ok,
        f"pooled accuracy {report.accuracy:.4f} ({correct}/{len(report.records)}), "
        f"{cfg.train.epochs} epochs, {seconds:.0f} s (need >= 0.95, <= 1200 s)",
    )


def test_memorization(shipped, verdict):
    cfg, manifest, store, _ = shipped
    picks = [manifest.by_id()[v] for v in ("S000_V00", "S001_V00", "S002_V00", "S003_V00")]
    assert sorted(int(r.label) for r in picks) == [0, 0, 1, 1]
    model = build_model(cfg.model, seed=0)
    _, losses = train_steps(model, picks, store, cfg.train, cfg.slice_spec, 200, np.random.default_rng(0))
    final = losses[-1][2]
    tail = float(np.mean([l for *_, l in losses[-10:]]))
    verdict(
        "memorization",
        len(losses) == 200 and final < 0.05 and tail < 0.05,
        f"loss after 200 steps {final:.4f}, mean of last 10 {tail:.4f} (need < 0.05)",
    )


def test_gradient_correctness(verdict):
    errors = [e for seed in range(3) for e in gradient_check(seed=seed)]
    bad = [e for e in errors if e[-1] > 1e-3]
    worst = max(errors, key=lambda e: e[-1])
    verdict(
        "gradient correctness",
        not bad,
        f"{len(errors) - len(bad)}/{len(errors)} sampled entries within 1e-3, worst {worst[-1]:.2e} ({worst[0]})",
    )


def test_schedule_endpoints(verdict):
    cfg = TrainConfig()
    problems = []
    for total in (1, 2, 7, 100, 1200, 4321):
        lrs = [lr_schedule(s, total, cfg) for s in range(total + 1)]
        if lrs[0] != 1e-4 or lrs[-1] != 1e-5:
            problems.append(f"total={total}: endpoints {lrs[0]}, {lrs[-1]}")
        if any(b > a for a, b in zip(lrs, lrs[1:])):
            problems.append(f"total={total}: not monotone")
    verdict("schedule endpoints", not problems, "; ".join(problems) or "lr(0)=1e-4, lr(total)=1e-5, nonincreasing")


def test_pose_gate_oracle(verdict):
    rng = np.random.default_rng(2024)
    special = np.array([-10.0, 10.0, np.nextafter(10.0, 11), np.nextafter(-10.0, -11), 0.0])
    n = 10_000
    vals = rng.uniform(-20, 20, (n, 3))
    use_special = rng.random((n, 3)) < 0.3
    vals[use_special] = rng.choice(special, use_special.sum())
    anns = [
        FrameAnnotation(
            frame_index=i, bbox=(0, 0, 10, 10), landmarks=[(1.0, 1.0)] * 5,
            yaw=float(y), pitch=float(p), roll=float(r),
        )
        for i, (y, p, r) in enumerate(vals)
    ]
    kept = filter_by_pose(anns, PoseGate())
    brute = [i for i, (y, p, r) in enumerate(vals) if -10 <= y <= 10 and -10 <= p <= 10 and -10 <= r <= 10]
    on_boundary = int(np.isin(np.abs(vals), [10.0]).any(axis=1).sum())
    verdict(
        "pose-gate oracle",
        kept == brute,
        f"{len(kept)}/{n} kept, identical to brute force; {on_boundary} triples touch +-10",
    )


def test_alignment_round_trip(verdict):
    rng = np.random.default_rng(99)
    worst_param, worst_px = 0.0, 0.0
    for _ in range(1000):
        truth = SimilarityTransform(
            rng.uniform(0.5, 2.0), math.radians(rng.uniform(-30, 30)), *rng.uniform(-50, 400, 2)
        )
        landmarks = truth.apply(TEMPLATE)
        recovered = estimate_similarity(TEMPLATE, landmarks)
        worst_param = max(
            worst_param,
            abs(recovered.scale - truth.scale),
            abs(recovered.theta - truth.theta),
            abs(recovered.tx - truth.tx),
            abs(recovered.ty - truth.ty),
        )
        to_template = estimate_similarity(landmarks, TEMPLATE)
        worst_px = max(worst_px, float(np.abs(to_template.apply(landmarks) - TEMPLATE).max()))
    verdict(
        "alignment round trip",
        worst_param <= 1e-6 and worst_px <= 0.5,
        f"max parameter error {worst_param:.2e} (<= 1e-6), max landmark error {worst_px:.2e} px (<= 0.5)",
    )


def brute_force_metrics(records):
    tp = fp = tn = fn = 0
    for r in records:
        pred = 1 if r.prob_asd >= 0.5 else 0
        if pred == 1 and r.label == 1:
            tp += 1
        elif pred == 1:
            fp += 1
        elif r.label == 0:
            tn += 1
        else:
            fn += 1
    acc = (tp + tn) / len(records)
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    return acc, f1


def test_metric_oracle(verdict):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        records = []
        for i in range(n):
            p = rng.choice([rng.random(), 0.5, 0.0, 1.0], p=[0.85, 0.05, 0.05, 0.05])
            records.append(
                PredictionRecord.from_slices(f"v{i}", [[1 - p, p]], int(rng.integers(0, 2)), int(rng.integers(0, 5)))
            )
        rep = compute_metrics(records)
        acc, f1 = brute_force_metrics(records)
        mismatches += rep.accuracy != acc or rep.f1 != f1
    fixed = [PredictionRecord.from_slices(f"t{i}", [[0.1, 0.9]], 1, 0) for i in range(5)]
    fixed += [PredictionRecord.from_slices("f", [[0.1, 0.9]], 0, 0)]
    fixed += [PredictionRecord.from_slices(f"n{i}", [[0.9, 0.1]], 1, 0) for i in range(3)]
    f1 = compute_metrics(fixed).f1
    verdict(
        "metric oracle",
        mismatches == 0 and f1 == 10 / 14,
        f"{1000 - mismatches}/1000 random sets match brute force exactly; F1(5,1,3) = {f1!r}",
    )


def test_aggregation_laws(verdict):
    rng = np.random.default_rng(8)
    failures = []
    for trial in range(500):
        probs = rng.random(int(rng.integers(1, 7)))
        slices = [[1 - p, p] for p in probs]
        base = aggregate_video(slices)
        for perm in itertools.islice(itertools.permutations(slices), 24):
            if aggregate_video(list(perm)) != base:
                failures.append(f"order changes the mean in trial {trial}")
                break
        if aggregate_video([slices[0]]) != slices[0][1]:
            failures.append(f"single-slice identity fails in trial {trial}")
    if binarize(0.5) != 1 or binarize(np.nextafter(0.5, 0)) != 0:
        failures.append("binarize boundary")
    verdict(
        "aggregation laws",
        not failures,
        "; ".join(failures[:3]) or "order-invariant over 500 sets, single-slice identity, binarize(0.5)=1",
    )


def test_fold_laws(verdict):
    rng = np.random.default_rng(11)
    failures = []
    for trial in range(200):
        k = int(rng.integers(2, 9))
        n_a, n_n = (k + int(rng.integers(0, 15)) for _ in range(2))
        subs = [(f"A{i}", 1) for i in range(n_a)] + [(f"N{i}", 0) for i in range(n_n)]
        order = rng.permutation(len(subs))
        subs = [subs[i] for i in order]
        try:
            check_partition(subs, k, make_folds(subs, k, int(rng.integers(2**31))))
        except AssertionError as e:
            failures.append(f"trial {trial} (k={k}): {e}")
    folds = make_folds([(f"A{i}", 1) for i in range(15)] + [(f"N{i}", 0) for i in range(15)], 5, 0)
    sizes = [
        (sum(s.startswith("A") for s in folds.subjects(f)), sum(s.startswith("N") for s in folds.subjects(f)))
        for f in range(5)
    ]
    if sizes != [(3, 3)] * 5:
        failures.append(f"30 subjects at k=5 gave {sizes}")
    verdict(
        "fold laws",
        not failures,
        "; ".join(failures[:3]) or "200 random combinations partition, exclusive, stratified within 1; 5 x (3+3)",
    )


def test_published_accuracy_cross_check(verdict):
    records = [PredictionRecord.from_slices(f"v{i}", [[0.2, 0.8]], 1 if i < 22 else 0, 0) for i in range(27)]
    acc = compute_metrics(records).accuracy
    verdict("published accuracy cross-check", f"{acc:.4f}" == "0.8148", f"22/27 reports {acc:.4f}")
