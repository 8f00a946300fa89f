"""Seven-class dermoscopy lesion classification: ingestion, augmentation,
two-phase fine-tuning, ensembling and challenge-format evaluation."""

from .augment import AugmentationSpec, OversamplePlan, RandomAugmenter, apply_augmentation, build_oversample_plan, sample_epoch
from .dataset import ClassDistribution, LesionClass, SampleRecord, class_distribution, load_ground_truth, stratified_split, verify_images
from .ensemble import PredictionSet, ProbabilityEnsemble, fuse
from .estimator import LesionClassifier
from .evaluate import (
    ConfusionMatrix,
    MetricsReport,
    accuracy,
    balanced_accuracy,
    confusion,
    evaluate_predictions,
    per_class_metrics,
    read_submission,
    write_submission,
)
from .model import BACKBONES, BackboneDescriptor, ClassifierModel, TrainabilityMode, build_classifier, set_trainable
from .preprocess import IMAGENET_MEANS, ImagePreprocessor, NormalizationParams, resize, subtract_mean, to_unit_range
from .train import EpochRecord, TrainSchedule, cross_entropy, early_stop_check, load_checkpoint, run_training, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "accuracy",
    "apply_augmentation",
    "AugmentationSpec",
    "BackboneDescriptor",
    "BACKBONES",
    "balanced_accuracy",
    "build_classifier",
    "build_oversample_plan",
    "class_distribution",
    "ClassDistribution",
    "ClassifierModel",
    "confusion",
    "ConfusionMatrix",
    "cross_entropy",
    "early_stop_check",
    "EpochRecord",
    "evaluate_predictions",
    "fuse",
    "IMAGENET_MEANS",
    "ImagePreprocessor",
    "LesionClass",
    "LesionClassifier",
    "load_checkpoint",
    "load_ground_truth",
    "MetricsReport",
    "NormalizationParams",
    "OversamplePlan",
    "per_class_metrics",
    "PredictionSet",
    "ProbabilityEnsemble",
    "RandomAugmenter",
    "read_submission",
    "resize",
    "run_training",
    "sample_epoch",
    "SampleRecord",
    "save_checkpoint",
    "set_trainable",
    "stratified_split",
    "subtract_mean",
    "to_unit_range",
    "TrainabilityMode",
    "TrainSchedule",
    "verify_images",
    "write_submission",
]
