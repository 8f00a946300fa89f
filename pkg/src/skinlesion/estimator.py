"""scikit-learn compatible wrapper around the fine-tuning pipeline."""

from __future__ import annotations

import logging
import warnings

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .augment import AugmentationSpec, build_oversample_plan
from .dataset import NUM_CLASSES, SampleRecord, class_distribution, stratified_split
from .evaluate import balanced_accuracy_from_labels, predicted_labels
from .exceptions import InsufficientClassError
from .model import build_classifier, forward
from .preprocess import IMAGENET_MEANS, NormalizationParams, preprocess_image
from .train import TrainSchedule, run_training
from .validation import check_images, check_labels

logger = logging.getLogger(__name__)


class LesionClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tune a pretrained backbone on 8-bit dermoscopy images.

    ``fit`` takes a list of ``(H, W, 3)`` uint8 images (sizes may differ) and
    labels given as class ordinals, class codes (``"MEL"``...) or one-hot
    rows. A stratified holdout drives checkpoint selection and early
    stopping; the best-scoring weights are kept.

    Parameters
    ----------
    backbone : str, default="tiny-test"
        Key into :data:`skinlesion.model.BACKBONES`.
    hidden_units : int or None, default=None
        Optional hidden dense layer in front of the 7-way output.
    phase1_epochs, phase1_lr, phase2_lr, max_epochs, early_stop_patience, batch_size
        Two-phase schedule; see :class:`skinlesion.train.TrainSchedule`.
    epoch_size : int or None, default=None
        Draws per epoch for class-balanced oversampling. ``None`` uses the
        training-set size rounded up to a multiple of 7.
    holdout_fraction : float, default=0.1
        Share of each class held out for validation. When a class is too
        small to split, training data doubles as the holdout (with a warning).
    augmentation : AugmentationSpec, dict, "default" or None, default="default"
        ``None`` disables augmentation.
    channel_means : tuple of float, default=IMAGENET_MEANS
    random_state : int, default=0
        Seeds the split, head initialization and every epoch's sampling.
    n_jobs : int, default=1
        Threads used for per-sample preprocessing.

    Attributes
    ----------
    model_ : ClassifierModel
    history_ : list of EpochRecord
    best_checkpoint_ : Checkpoint
    classes_ : ndarray of shape (7,)
    """

    def __init__(
        self,
        backbone="tiny-test",
        hidden_units=None,
        phase1_epochs=2,
        phase1_lr=1e-4,
        phase2_lr=1e-2,
        max_epochs=50,
        early_stop_patience=10,
        batch_size=32,
        epoch_size=None,
        holdout_fraction=0.1,
        augmentation="default",
        channel_means=IMAGENET_MEANS,
        random_state=0,
        n_jobs=1,
    ):
        self.backbone = backbone
        self.hidden_units = hidden_units
        self.phase1_epochs = phase1_epochs
        self.phase1_lr = phase1_lr
        self.phase2_lr = phase2_lr
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.batch_size = batch_size
        self.epoch_size = epoch_size
        self.holdout_fraction = holdout_fraction
        self.augmentation = augmentation
        self.channel_means = channel_means
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _augmentation_spec(self):
        if self.augmentation is None:
            return None
        if isinstance(self.augmentation, AugmentationSpec):
            return self.augmentation
        if self.augmentation == "default":
            return AugmentationSpec()
        return AugmentationSpec.from_dict(dict(self.augmentation))

    def fit(self, X, y):
        images = check_images(X)
        labels = check_labels(y, len(images))
        records = [SampleRecord.from_class(f"sample_{i:06d}", f"sample_{i:06d}", c) for i, c in enumerate(labels)]
        store = {r.image_id: img for r, img in zip(records, images)}

        seed = int(self.random_state)
        try:
            train, holdout = stratified_split(records, self.holdout_fraction, seed)
        except InsufficientClassError as exc:
            warnings.warn(f"{exc}; validating on the training data instead", stacklevel=2)
            train, holdout = records, records

        epoch_size = self.epoch_size or max(NUM_CLASSES, -(-len(train) // NUM_CLASSES) * NUM_CLASSES)
        plan = build_oversample_plan(class_distribution(train), epoch_size)
        schedule = TrainSchedule(
            phase1_epochs=self.phase1_epochs,
            phase1_lr=self.phase1_lr,
            phase2_lr=self.phase2_lr,
            max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience,
            batch_size=self.batch_size,
            seed=seed,
        )
        self.params_ = NormalizationParams(tuple(self.channel_means))
        model = build_classifier(self.backbone, init_seed=seed, hidden_units=self.hidden_units)
        best, history = run_training(
            model,
            train,
            holdout,
            schedule,
            self._augmentation_spec(),
            plan,
            loader=lambda r: store[r.image_id],
            params=self.params_,
            n_jobs=self.n_jobs,
        )
        self.model_ = best.to_model()
        self.history_ = history
        self.best_checkpoint_ = best
        self.classes_ = np.arange(NUM_CLASSES)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        images = check_images(X)
        side = self.model_.descriptor.input_side
        out = []
        for start in range(0, len(images), self.batch_size):
            batch = np.stack([preprocess_image(img, self.params_, side) for img in images[start : start + self.batch_size]])
            out.append(forward(self.model_, batch))
        return np.concatenate(out)

    def predict(self, X):
        return predicted_labels(self.predict_proba(X))

    def score(self, X, y, sample_weight=None):
        """Balanced accuracy, the ranking metric for this task."""
        return balanced_accuracy_from_labels(check_labels(y), self.predict(X))
