import math

import numpy as np
import pytest
import torch

import skinlesion.train as train_mod
from skinlesion.augment import AugmentationSpec, build_oversample_plan
from skinlesion.dataset import class_distribution
from skinlesion.exceptions import CheckpointFormatError, DivergenceError, LabelError
from skinlesion.model import TrainabilityMode, build_classifier
from skinlesion.train import (
    EpochRecord,
    TrainSchedule,
    cross_entropy,
    early_stop_check,
    format_history,
    load_checkpoint,
    plot_history,
    read_checkpoint,
    read_history,
    run_training,
    save_checkpoint,
)


def scripted(scores):
    return [EpochRecord(i + 1, 1.0, s, 1e-3, TrainabilityMode.ALL) for i, s in enumerate(scores)]


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def fit(fixture, schedule, spec=None, epoch_size=8, seed=0, **kw):
    records, loader = fixture
    model = build_classifier("tiny-test", init_seed=seed)
    plan = build_oversample_plan(class_distribution(records), epoch_size)
    best, history = run_training(model, records, records, schedule, spec, plan, loader=loader, **kw)
    return model, best, history


# --- loss ---------------------------------------------------------------------


def test_cross_entropy_examples():
    onehot = np.eye(7)[2]
    assert cross_entropy(onehot, onehot) == 0.0
    assert cross_entropy(np.full(7, 1 / 7), onehot) == pytest.approx(math.log(7), abs=1e-9)
    half = np.array([0.5, 0.5, 0, 0, 0, 0, 0])
    assert cross_entropy(half, np.eye(7)[1]) == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_floor_and_batch_mean():
    assert cross_entropy(np.eye(7)[0], np.eye(7)[3]) == pytest.approx(-math.log(1e-12))
    probs = np.array([np.full(7, 1 / 7), np.eye(7)[4]])
    assert cross_entropy(probs, np.eye(7)[[0, 4]]) == pytest.approx(math.log(7) / 2, abs=1e-12)


@pytest.mark.parametrize("labels", [np.zeros(7), np.full(7, 0.5), np.eye(6)[0]])
def test_cross_entropy_rejects_bad_labels(labels):
    with pytest.raises(LabelError):
        cross_entropy(np.full(7, 1 / 7), labels)


def test_batch_loss_matches_numpy():
    logits = torch.randn(5, 7, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    targets = torch.tensor([0, 3, 6, 2, 2])
    probs = torch.softmax(logits, 1).numpy()
    expected = cross_entropy(probs, np.eye(7)[targets.numpy()])
    assert train_mod.batch_loss(logits, targets).item() == pytest.approx(expected, abs=1e-12)


# --- early stopping -----------------------------------------------------------


@pytest.mark.parametrize(
    "scores,patience,fires",
    [
        ([0.5, 0.6, 0.55, 0.55], 2, True),
        ([0.5, 0.6, 0.55], 2, False),
        ([0.6, 0.6, 0.6], 2, True),
        ([0.1, 0.2, 0.3, 0.4], 1, False),
        ([0.4], 1, False),
    ],
)
def test_early_stop_examples(scores, patience, fires):
    assert early_stop_check(scripted(scores), patience) is fires


def test_early_stop_needs_history():
    with pytest.raises(ValueError):
        early_stop_check([], 1)


# --- schedule -----------------------------------------------------------------


def test_schedule_validation():
    with pytest.raises(ValueError):
        TrainSchedule(phase1_epochs=5, max_epochs=5)
    with pytest.raises(ValueError):
        TrainSchedule(phase1_lr=0)
    with pytest.raises(ValueError):
        TrainSchedule(early_stop_patience=0)


def test_history_phases_and_rates(eight_fixture):
    schedule = TrainSchedule(phase1_epochs=2, phase1_lr=1e-3, phase2_lr=5e-3, max_epochs=4, early_stop_patience=10)
    _, _, history = fit(eight_fixture, schedule)
    assert [h.trainability_mode for h in history] == ["HEAD_ONLY"] * 2 + ["ALL"] * 2
    assert [h.learning_rate for h in history] == [1e-3, 1e-3, 5e-3, 5e-3]
    assert [h.epoch for h in history] == [1, 2, 3, 4]


def test_frozen_backbone_then_unfrozen(eight_fixture):
    records, loader = eight_fixture
    model = build_classifier("tiny-test", init_seed=1)
    start = snapshot(model)
    seen = {}

    def watch(record):
        seen[record.epoch] = snapshot(model)

    plan = build_oversample_plan(class_distribution(records), 8)
    schedule = TrainSchedule(phase1_epochs=2, phase1_lr=1e-2, phase2_lr=1e-2, max_epochs=3, batch_size=4)
    run_training(model, records, records, schedule, AugmentationSpec(), plan, loader=loader, on_epoch=watch)
    backbone = [k for k in start if k.startswith("backbone.")]
    head = [k for k in start if k.startswith("head.")]
    assert all(torch.equal(seen[2][k], start[k]) for k in backbone)
    assert any(not torch.equal(seen[2][k], start[k]) for k in head)
    assert any(not torch.equal(seen[3][k], seen[2][k]) for k in backbone)


def test_overfit_and_reproducible(eight_fixture):
    schedule = TrainSchedule(phase1_epochs=2, phase1_lr=1e-2, phase2_lr=1e-2, max_epochs=60, early_stop_patience=100, batch_size=1)
    _, _, a = fit(eight_fixture, schedule)
    assert a[-1].train_loss < 0.05
    _, _, b = fit(eight_fixture, schedule)
    assert max(abs(x.train_loss - y.train_loss) for x, y in zip(a, b)) <= 1e-9


def test_best_checkpoint_and_early_stop(eight_fixture):
    schedule = TrainSchedule(phase1_epochs=1, phase1_lr=1e-3, phase2_lr=1e-3, max_epochs=12, early_stop_patience=2)
    _, best, history = fit(eight_fixture, schedule, spec=AugmentationSpec())
    scores = [h.validation_score for h in history]
    assert best.validation_score == max(scores)
    assert best.epoch == scores.index(max(scores)) + 1
    assert len(history) <= best.epoch + 2
    assert len(history) == 12 or early_stop_check(history, 2)


def test_label_preserved_through_augmentation(eight_fixture, monkeypatch):
    records, loader = eight_fixture
    by_image = {}

    def tracking_loader(record):
        img = loader(record)
        by_image[id(img)] = record
        return img

    calls = []
    real_loss = train_mod.batch_loss
    real_prepare = train_mod.prepare_sample

    def spy_prepare(image, params, side, spec=None, rng=None):
        calls.append(("sample", by_image[id(image)].lesion_class))
        return real_prepare(image, params, side, spec, rng)

    def spy_loss(logits, targets):
        calls.append(("targets", targets.tolist()))
        return real_loss(logits, targets)

    monkeypatch.setattr(train_mod, "prepare_sample", spy_prepare)
    monkeypatch.setattr(train_mod, "batch_loss", spy_loss)
    plan = build_oversample_plan(class_distribution(records), 14)
    schedule = TrainSchedule(phase1_epochs=1, max_epochs=2, batch_size=4)
    run_training(build_classifier("tiny-test"), records, records, schedule, AugmentationSpec(), plan, loader=tracking_loader)

    # Holdout preparation comes first; after that each batch's samples precede its targets.
    pending = []
    for kind, value in calls[len(records) :]:
        if kind == "sample":
            pending.append(int(value))
        else:
            assert value == pending
            pending = []


def test_divergence_raises(eight_fixture, monkeypatch):
    monkeypatch.setattr(train_mod, "batch_loss", lambda logits, targets: logits.sum() * float("nan"))
    with pytest.raises(DivergenceError) as info:
        fit(eight_fixture, TrainSchedule(phase1_epochs=1, max_epochs=2))
    assert info.value.epoch == 1 and info.value.batch == 0


def test_empty_inputs_rejected(eight_fixture):
    records, loader = eight_fixture
    plan = build_oversample_plan(class_distribution(records), 8)
    with pytest.raises(ValueError):
        run_training(build_classifier("tiny-test"), records, [], TrainSchedule(), None, plan, loader=loader)


# --- checkpoints and resume ---------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path, eight_fixture):
    model, best, history = fit(eight_fixture, TrainSchedule(phase1_epochs=1, max_epochs=2))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, history, path, epoch=2, validation_score=history[-1].validation_score)
    restored, restored_history = load_checkpoint(path)
    a, b = snapshot(model), snapshot(restored)
    assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
    assert restored_history == history
    assert restored.trainability_mode == model.trainability_mode
    assert "epoch=2" in (tmp_path / "m.ckpt.meta.txt").read_text()


def test_truncated_checkpoint_rejected(tmp_path, eight_fixture):
    model, _, history = fit(eight_fixture, TrainSchedule(phase1_epochs=1, max_epochs=2))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, history, path, epoch=2, validation_score=0.5)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointFormatError):
        read_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "missing.ckpt")


class Interrupted(Exception):
    pass


@pytest.mark.parametrize("stop_after", [1, 2, 3])
def test_resume_matches_uninterrupted(tmp_path, eight_fixture, stop_after):
    schedule = TrainSchedule(phase1_epochs=2, phase1_lr=1e-2, phase2_lr=1e-2, max_epochs=4, early_stop_patience=50, batch_size=4)
    spec = AugmentationSpec()
    _, _, full = fit(eight_fixture, schedule, spec=spec)

    def crash(record):
        if record.epoch == stop_after:
            raise Interrupted

    with pytest.raises(Interrupted):
        fit(eight_fixture, schedule, spec=spec, checkpoint_dir=tmp_path, on_epoch=crash)
    # a different init seed proves the weights come from the checkpoint
    _, _, resumed = fit(eight_fixture, schedule, spec=spec, seed=123, checkpoint_dir=tmp_path, resume=True)
    assert len(resumed) == 4
    for x, y in zip(full, resumed):
        assert abs(x.train_loss - y.train_loss) <= 1e-9
        assert x.validation_score == y.validation_score


# --- history outputs ----------------------------------------------------------


def test_history_csv_round_trip(tmp_path):
    history = [
        EpochRecord(1, 1.25, 0.3, 1e-4, TrainabilityMode.HEAD_ONLY, 0.5),
        EpochRecord(2, 0.1 + 0.2, 2 / 3, 1e-2, TrainabilityMode.ALL, 0.25),
    ]
    path = tmp_path / "history.csv"
    path.write_text(format_history(history))
    assert path.read_text().splitlines()[0] == "epoch,phase,lr,train_loss,val_score,seconds"
    assert read_history(path) == history


def test_plots_written(tmp_path):
    history = scripted([0.2, 0.4, 0.5])
    paths = plot_history(history, tmp_path / "plots", phase1_epochs=1)
    assert [p.name for p in paths] == ["loss.png", "val_score.png"]
    assert all(p.stat().st_size > 0 for p in paths)
