import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from asdvideo.errors import (
    CheckpointMismatch,
    ConfigError,
    InvalidLabel,
    NonFiniteLoss,
    OutOfRangeStep,
    TooFewSubjects,
    UnknownVideo,
)
from asdvideo.model import BackboneConfig, ModelConfig, build_model
from asdvideo.sampling import SliceSpec
from asdvideo.train import (
    FrameStore,
    TrainConfig,
    cross_entropy,
    load_checkpoint,
    lr_schedule,
    make_folds,
    read_report,
    run_cross_validation,
    save_checkpoint,
    train_fold,
    train_steps,
    video_nll,
    video_rng,
    write_report,
)


def subjects(n_per_class):
    return [(f"A{i:02d}", 1) for i in range(n_per_class)] + [(f"N{i:02d}", 0) for i in range(n_per_class)]


def tiny_model_config(slice_len=4):
    return ModelConfig(
        main=BackboneConfig(feature_dim=8, width=4),
        fer=BackboneConfig(feature_dim=8, width=4),
        max_seq_len=slice_len + 1,
    )


# --- folds ---


def test_thirty_subjects_five_folds():
    folds = make_folds(subjects(15), 5, seed=0)
    for k in range(5):
        members = folds.subjects(k)
        assert len(members) == 6
        assert sum(m.startswith("A") for m in members) == 3


def check_partition(subs, k, folds):
    all_ids = {s for s, _ in subs}
    seen = set()
    for f in range(k):
        members = set(folds.subjects(f))
        assert members, f"fold {f} empty"
        assert not members & seen
        seen |= members
    assert seen == all_ids
    per_class = {}
    for sid, label in subs:
        per_class.setdefault(label, []).append(folds.fold_of[sid])
    for fs in per_class.values():
        counts = np.bincount(fs, minlength=k)
        assert counts.max() - counts.min() <= 1
    sizes = np.bincount(list(folds.fold_of.values()), minlength=k)
    assert sizes.max() - sizes.min() <= 1


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(0, 12), st.integers(0, 12), st.integers(0, 2**31))
def test_fold_laws(k, extra_a, extra_n, seed):
    subs = [(f"A{i}", 1) for i in range(k + extra_a)] + [(f"N{i}", 0) for i in range(k + extra_n)]
    check_partition(subs, k, make_folds(subs, k, seed))


def test_folds_deterministic_and_seeded():
    a = make_folds(subjects(15), 5, seed=1)
    assert a == make_folds(subjects(15), 5, seed=1)
    assert a != make_folds(subjects(15), 5, seed=2)


def test_folds_too_few_subjects():
    with pytest.raises(TooFewSubjects):
        make_folds(subjects(3), 4)
    with pytest.raises(TooFewSubjects):
        make_folds(subjects(10), 1)
    with pytest.raises(ValueError):
        TrainConfig(k_folds=1)


def test_folds_reject_conflicting_labels():
    with pytest.raises(ConfigError):
        make_folds([("A", 0), ("A", 1), ("B", 0), ("C", 1)], 2)


def test_split_keeps_subjects_apart(small_preprocessed):
    manifest, _ = small_preprocessed
    folds = make_folds(manifest.subjects(), 2, seed=0)
    for k in range(2):
        train, test = folds.split(manifest, k)
        assert {r.subject_id for r in train}.isdisjoint({r.subject_id for r in test})
        assert len(train) + len(test) == len(manifest)
    with pytest.raises(ConfigError):
        folds.split(manifest, 2)


# --- schedule ---


def test_lr_endpoints_and_midpoint():
    cfg = TrainConfig()
    assert lr_schedule(0, 400, cfg) == 1e-4
    assert lr_schedule(400, 400, cfg) == 1e-5
    assert lr_schedule(200, 400, cfg) == pytest.approx(5.5e-5, abs=1e-15)


def test_lr_monotone():
    cfg = TrainConfig()
    lrs = [lr_schedule(s, 1000, cfg) for s in range(1001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(1e-5 <= v <= 1e-4 for v in lrs)


def test_lr_out_of_range():
    cfg = TrainConfig()
    for step, total in [(-1, 10), (11, 10), (0, 0)]:
        with pytest.raises(OutOfRangeStep):
            lr_schedule(step, total, cfg)


# --- loss ---


def test_cross_entropy_values():
    assert cross_entropy([[0.0, 1.0]], [1]).item() == 0.0
    assert cross_entropy([[0.5, 0.5]], [0]).item() == pytest.approx(math.log(2))
    assert cross_entropy([[0.1, 0.9]], [1]).item() == pytest.approx(0.10536, abs=1e-5)
    assert cross_entropy([[0.1, 0.9], [0.5, 0.5]], [1, 1]).item() == pytest.approx(
        (-math.log(0.9) + math.log(2)) / 2
    )


def test_cross_entropy_invalid_label():
    with pytest.raises(InvalidLabel):
        cross_entropy([[0.5, 0.5]], [2])
    with pytest.raises(ValueError):
        cross_entropy([[0.5, 0.5]], [0, 1])


def test_video_nll_is_cross_entropy_of_mean():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(6, 2, generator=g, dtype=torch.float64) * 3
    labels = [0, 1, 1]
    mean = logits.softmax(-1).view(3, 2, 2).mean(1)
    assert video_nll(logits, labels, 2).item() == pytest.approx(cross_entropy(mean, labels).item(), rel=1e-12)


def test_video_nll_stable_for_extreme_logits():
    logits = torch.tensor([[200.0, -200.0], [200.0, -200.0]])
    loss = video_nll(logits, [1], 2)
    assert torch.isfinite(loss) and loss.item() == pytest.approx(400.0)


# --- training loop ---


@pytest.fixture(scope="module")
def store(small_preprocessed):
    manifest, out = small_preprocessed
    return manifest, FrameStore(out)


def test_frame_store_unknown_video(store):
    _, st_ = store
    with pytest.raises(UnknownVideo):
        st_.kept("missing")


def test_frame_store_skips_short_videos(store, caplog):
    manifest, st_ = store
    assert st_.usable(manifest.records, 4) == manifest.records
    assert st_.usable(manifest.records, 10_000) == []
    assert "skipping" in caplog.text


def test_video_rng_independent_of_order():
    a = video_rng(3, "S000_V00").integers(1 << 30, size=4)
    video_rng(3, "S001_V00").integers(1 << 30, size=10)
    assert np.array_equal(a, video_rng(3, "S000_V00").integers(1 << 30, size=4))
    assert not np.array_equal(a, video_rng(3, "S001_V00").integers(1 << 30, size=4))


def test_initial_loss_near_chance(store):
    manifest, st_ = store
    spec = SliceSpec(num_slices=2, slice_len=4)
    cfg = TrainConfig(epochs=1, batch_size=4)
    for seed in range(10):
        model = build_model(tiny_model_config(), seed=seed)
        _, losses = train_steps(model, manifest.records[:4], st_, cfg, spec, 1, np.random.default_rng(seed))
        assert 0.60 <= losses[0][2] <= 0.78, (seed, losses[0])


def test_non_finite_loss_is_reported(store):
    manifest, st_ = store
    model = build_model(tiny_model_config(), seed=0)
    with torch.no_grad():
        model.head[-1].bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss, match="step 0"):
        train_steps(model, manifest.records, st_, TrainConfig(), SliceSpec(slice_len=4), 2, np.random.default_rng(0))


def test_train_fold_checkpoint_roundtrip(store, tmp_path):
    manifest, st_ = store
    folds = make_folds(manifest.subjects(), 2, seed=0)
    spec = SliceSpec(num_slices=2, slice_len=4)
    cfg = TrainConfig(epochs=2, batch_size=2, k_folds=2)
    mcfg = tiny_model_config()
    res = train_fold(manifest, folds, 0, mcfg, cfg, spec, st_, out_dir=tmp_path / "ck")
    assert len(res.losses) == 2 * 2
    assert set(res.train_ids).isdisjoint(res.test_ids)
    assert res.losses[0][1] == cfg.base_lr and res.losses[-1][1] > cfg.min_lr
    ckpt = load_checkpoint(tmp_path / "ck", mcfg)
    assert ckpt.meta["fold_index"] == 0 and ckpt.meta["test_videos"] == res.test_ids
    for a, b in zip(res.model.state_dict().values(), ckpt.model.state_dict().values()):
        assert torch.equal(a, b)
    again = train_fold(manifest, folds, 0, mcfg, cfg, spec, st_)
    assert again.losses == res.losses


def test_checkpoint_mismatch(tmp_path):
    model = build_model(tiny_model_config(), seed=0)
    save_checkpoint(tmp_path / "c", model, {})
    other = tiny_model_config().model_copy(update={"main": BackboneConfig(feature_dim=12, width=4)})
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "c", other)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "nothing")
    (tmp_path / "c" / "model.pt").write_bytes(b"garbage")
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "c")


def test_cross_validation_covers_every_video(store, tmp_path):
    manifest, st_ = store
    spec = SliceSpec(num_slices=2, slice_len=4)
    cfg = TrainConfig(epochs=1, batch_size=4, k_folds=2)
    report = run_cross_validation(manifest, tiny_model_config(), cfg, spec, st_, out_dir=tmp_path)
    assert sorted(r.video_id for r in report.records) == sorted(r.video_id for r in manifest)
    folds = make_folds(manifest.subjects(), 2, cfg.seed)
    for r in report.records:
        assert r.fold_index == folds.fold_of[r.subject_id]
        assert len(r.slice_probs) == 2
        assert all(len(f) == 4 for f in r.slice_frames)
    correct = sum(r.predicted == r.label for r in report.records)
    assert report.accuracy == correct / len(manifest)
    assert (tmp_path / "fold_0" / "model.pt").is_file() and (tmp_path / "fold_1" / "model.pt").is_file()
    path = write_report(report, tmp_path / "report.json")
    assert read_report(path).to_dict() == report.to_dict()
