import numpy as np
import pytest
from sklearn.base import clone

from skinlesion.dataset import CLASS_CODES
from skinlesion.estimator import LesionClassifier
from skinlesion.exceptions import ChannelError, LabelError
from skinlesion.validation import check_images, check_labels

from conftest import textured_images

FAST = dict(phase1_epochs=2, phase1_lr=1e-2, phase2_lr=1e-2, max_epochs=40, early_stop_patience=40, batch_size=1, augmentation=None)


def test_params_round_trip_and_clone():
    est = LesionClassifier(max_epochs=7, augmentation={"rotation_degrees": (-5, 5)})
    params = est.get_params()
    assert params["max_epochs"] == 7 and params["backbone"] == "tiny-test"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(phase2_lr=0.5)
    assert est.phase2_lr == 0.5


def test_fit_predict_memorizes_small_set():
    images = textured_images(8, seed=11)
    labels = list(range(7)) + [1]
    with pytest.warns(UserWarning, match="training data"):
        est = LesionClassifier(**FAST).fit(images, labels)
    proba = est.predict_proba(images)
    assert proba.shape == (8, 7)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    assert est.score(images, labels) == 1.0
    assert est.best_checkpoint_.validation_score == max(h.validation_score for h in est.history_)


def test_label_formats_agree():
    images = textured_images(8, seed=11)
    ordinals = list(range(7)) + [1]
    codes = [CLASS_CODES[i] for i in ordinals]
    onehot = np.eye(7, dtype=int)[ordinals]
    params = dict(FAST, max_epochs=3)
    runs = []
    for y in (ordinals, codes, onehot):
        with pytest.warns(UserWarning):
            runs.append(LesionClassifier(**params).fit(images, y).predict_proba(images))
    assert np.array_equal(runs[0], runs[1]) and np.array_equal(runs[0], runs[2])


def test_holdout_split_used_when_possible():
    images = textured_images(14, seed=2)
    labels = [i % 7 for i in range(14)]
    est = LesionClassifier(**dict(FAST, max_epochs=3), holdout_fraction=0.5).fit(images, labels)
    assert len(est.history_) == 3


def test_predict_before_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        LesionClassifier().predict(textured_images(1))


def test_check_images():
    imgs = check_images(np.zeros((2, 5, 6, 3), dtype=np.int32))
    assert len(imgs) == 2 and imgs[0].dtype == np.uint8
    mixed = check_images([np.zeros((4, 4, 3), np.uint8), np.zeros((6, 2, 3), np.uint8)])
    assert [m.shape for m in mixed] == [(4, 4, 3), (6, 2, 3)]
    with pytest.raises(ChannelError):
        check_images([np.zeros((4, 4))])
    with pytest.raises(ValueError):
        check_images([np.full((4, 4, 3), 300)])
    with pytest.raises(ValueError):
        check_images([])


def test_check_labels():
    assert check_labels(["MEL", "VASC"]).tolist() == [0, 6]
    assert check_labels(np.eye(7)[[3]]).tolist() == [3]
    for bad in (["XYZ"], [7], [-1], np.full((1, 7), 0.5), [0.5]):
        with pytest.raises(LabelError):
            check_labels(bad)
    with pytest.raises(ValueError):
        check_labels([0, 1], n_samples=3)
