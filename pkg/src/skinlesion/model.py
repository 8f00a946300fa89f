"""Pretrained feature extractors with a fresh 7-way softmax head."""

from __future__ import annotations

import enum
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .dataset import NUM_CLASSES
from .exceptions import ShapeError, WeightLoadError

logger = logging.getLogger(__name__)

WEIGHTS_CACHE_ENV = "SKINLESION_WEIGHTS_CACHE"


class TrainabilityMode(str, enum.Enum):
    HEAD_ONLY = "HEAD_ONLY"
    ALL = "ALL"


@dataclass(frozen=True)
class BackboneDescriptor:
    name: str
    input_side: int
    feature_dim: int
    provider_uri: str | None = None

    def __post_init__(self):
        if self.input_side < 8:
            raise ValueError(f"input_side must be >= 8, got {self.input_side}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be >= 1, got {self.feature_dim}")

    def to_dict(self):
        return asdict(self)


# Input sides and pooled feature widths are those published with each network.
BACKBONES = {
    d.name: d
    for d in (
        BackboneDescriptor("pnasnet5large", 331, 4320, "timm:pnasnet5large"),
        BackboneDescriptor("inceptionresnetv2", 299, 1536, "timm:inception_resnet_v2"),
        BackboneDescriptor("senet154", 224, 2048, "timm:legacy_senet154"),
        BackboneDescriptor("inceptionv4", 299, 1536, "timm:inception_v4"),
        BackboneDescriptor("tiny-test", 32, 16, None),
    )
}


def get_descriptor(name) -> BackboneDescriptor:
    if isinstance(name, BackboneDescriptor):
        return name
    try:
        return BACKBONES[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}") from None


class TinyBackbone(nn.Module):
    """Two small conv blocks and global average pooling: 32x32x3 -> 16 features."""

    def __init__(self, feature_dim=16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 8, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(8, feature_dim, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x):
        return self.features(x)


def _load_provider_backbone(descriptor: BackboneDescriptor, pretrained: bool) -> nn.Module:
    scheme, _, model_name = (descriptor.provider_uri or "").partition(":")
    if scheme != "timm" or not model_name:
        raise WeightLoadError(f"{descriptor.name}: unsupported provider uri {descriptor.provider_uri!r}")
    cache = os.environ.get(WEIGHTS_CACHE_ENV)
    if cache:
        os.environ.setdefault("TORCH_HOME", cache)
        os.environ.setdefault("HF_HOME", cache)
    try:
        import timm
    except ImportError as exc:
        raise WeightLoadError(f"{descriptor.name}: the 'timm' package is required for pretrained backbones") from exc
    try:
        backbone = timm.create_model(model_name, pretrained=pretrained, num_classes=0)
    except Exception as exc:
        raise WeightLoadError(f"{descriptor.name}: could not resolve {descriptor.provider_uri}: {exc}") from exc
    if backbone.num_features != descriptor.feature_dim:
        raise ShapeError(
            f"{descriptor.name}: weights produce {backbone.num_features} features, descriptor says {descriptor.feature_dim}"
        )
    return backbone


class ClassifierModel(nn.Module):
    """Backbone feature extractor followed by a dense classification head.

    In ``HEAD_ONLY`` mode the backbone is also kept in eval mode so that
    normalization buffers stay frozen along with the weights.
    """

    def __init__(self, descriptor, backbone, num_classes=NUM_CLASSES, hidden_units=None):
        super().__init__()
        self.descriptor = descriptor
        self.num_classes = num_classes
        self.hidden_units = hidden_units
        self.backbone = backbone
        if hidden_units:
            self.head = nn.Sequential(
                nn.Linear(descriptor.feature_dim, hidden_units), nn.ReLU(), nn.Linear(hidden_units, num_classes)
            )
        else:
            self.head = nn.Linear(descriptor.feature_dim, num_classes)
        self.trainability_mode = TrainabilityMode.HEAD_ONLY

    def train(self, mode=True):
        super().train(mode)
        if mode and self.trainability_mode == TrainabilityMode.HEAD_ONLY:
            self.backbone.eval()
        return self

    def check_batch(self, batch):
        side = self.descriptor.input_side
        if batch.ndim != 4 or tuple(batch.shape[1:]) != (3, side, side):
            raise ShapeError(f"{self.descriptor.name} expects batches of shape (N, 3, {side}, {side}), got {tuple(batch.shape)}")

    def features(self, batch):
        self.check_batch(batch)
        return self.backbone(batch)

    def logits(self, batch):
        return self.head(self.features(batch))

    def forward(self, batch):
        return torch.softmax(self.logits(batch), dim=1)

    @property
    def dtype(self):
        return next(self.parameters()).dtype


def _init_head(head: nn.Module, generator: torch.Generator):
    for layer in head.modules():
        if isinstance(layer, nn.Linear):
            bound = 1.0 / math.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.zero_()


def build_classifier(
    descriptor,
    num_classes=NUM_CLASSES,
    init_seed=0,
    hidden_units=None,
    pretrained=True,
    dtype=torch.float32,
) -> ClassifierModel:
    """Build a classifier in ``HEAD_ONLY`` mode.

    The ``tiny-test`` backbone is seeded from ``init_seed``; provider
    backbones load pretrained weights unless ``pretrained=False`` (used when
    a checkpoint is about to overwrite them anyway).
    """
    descriptor = get_descriptor(descriptor)
    # Default layer initializers draw from the global generator; keep it untouched.
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        if descriptor.provider_uri is None:
            backbone = TinyBackbone(descriptor.feature_dim)
        else:
            backbone = _load_provider_backbone(descriptor, pretrained)
        model = ClassifierModel(descriptor, backbone, num_classes, hidden_units)
    _init_head(model.head, torch.Generator().manual_seed(int(init_seed)))
    model.to(dtype)
    return set_trainable(model, TrainabilityMode.HEAD_ONLY)


def set_trainable(model: ClassifierModel, mode) -> ClassifierModel:
    mode = TrainabilityMode(mode)
    for p in model.backbone.parameters():
        p.requires_grad_(mode == TrainabilityMode.ALL)
    for p in model.head.parameters():
        p.requires_grad_(True)
    model.trainability_mode = mode
    if model.training:
        model.train()
    return model


def count_parameters(module: nn.Module, trainable_only=False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def softmax(logits) -> np.ndarray:
    """Row-wise ``exp(z - max z) / sum exp(z - max z)``."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: ClassifierModel, batch) -> np.ndarray:
    """Class probabilities for a preprocessed ``(N, 3, side, side)`` batch, no gradients."""
    x = torch.as_tensor(np.asarray(batch), dtype=model.dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(x).double().numpy()
    finally:
        model.train(was_training)


def head_gradient(model: ClassifierModel, batch, labels):
    """Closed-form gradient of mean cross-entropy w.r.t. a single-layer head.

    For ``p = softmax(W f + b)`` and one-hot ``y``: ``dL/dW = (p - y)^T f / n``
    and ``dL/db = mean(p - y)``. Returns ``(grad_weight, grad_bias)``.
    """
    if not isinstance(model.head, nn.Linear):
        raise TypeError("closed-form head gradient needs a single linear head")
    x = torch.as_tensor(np.asarray(batch), dtype=model.dtype)
    with torch.no_grad():
        feats = model.features(x).double().numpy()
        w = model.head.weight.double().numpy()
        b = model.head.bias.double().numpy()
    y = np.asarray(labels, dtype=np.float64)
    delta = softmax(feats @ w.T + b) - y
    return delta.T @ feats / len(feats), delta.mean(axis=0)
