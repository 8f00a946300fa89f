"""Pixel normalization and resizing of decoded RGB images.

Order is fixed: ``to_unit_range`` -> (augmentation) -> ``subtract_mean`` -> ``resize``.
Images are ``(H, W, 3)`` arrays throughout; only :class:`ImagePreprocessor`
emits channel-first batches for the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ChannelError, DimensionError

# Published ILSVRC-2012 per-channel RGB means on the [0, 1] scale.
IMAGENET_MEANS = (0.485, 0.456, 0.406)


@dataclass(frozen=True)
class NormalizationParams:
    channel_means: tuple = IMAGENET_MEANS

    def __post_init__(self):
        means = tuple(float(m) for m in self.channel_means)
        if len(means) != 3:
            raise ChannelError(f"expected 3 channel means, got {len(means)}")
        if any(not 0.0 <= m <= 1.0 for m in means):
            raise ValueError(f"channel means must lie in [0, 1], got {means}")
        object.__setattr__(self, "channel_means", means)


def check_rgb(image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ChannelError(f"expected an (H, W, 3) RGB image, got shape {image.shape}")
    return image


def to_unit_range(image) -> np.ndarray:
    """Map 8-bit RGB values to ``value / 255`` as float64."""
    image = check_rgb(image)
    if not (np.issubdtype(image.dtype, np.integer) or image.dtype == bool):
        if not np.array_equal(image, np.round(image)):
            raise ValueError("to_unit_range expects integer pixel values")
    if image.size and (image.min() < 0 or image.max() > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    return image.astype(np.float64) / 255.0


def subtract_mean(image, params: NormalizationParams = NormalizationParams()) -> np.ndarray:
    image = check_rgb(image)
    return image - np.asarray(params.channel_means, dtype=image.dtype if image.dtype.kind == "f" else np.float64)


def resize(image, target_height: int, target_width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and no antialiasing."""
    image = check_rgb(image)
    if int(target_height) < 1 or int(target_width) < 1:
        raise DimensionError(f"target size must be positive, got {target_height}x{target_width}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise DimensionError(f"cannot resize an empty image of shape {image.shape}")
    src = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(src, size=(int(target_height), int(target_width)), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).numpy().copy()


def normalize_and_resize(unit_image, params: NormalizationParams, side: int) -> np.ndarray:
    """Mean-subtract and resize a [0, 1] image; returns channel-first ``(3, side, side)``."""
    out = resize(subtract_mean(unit_image, params), side, side)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def preprocess_image(image, params: NormalizationParams, side: int) -> np.ndarray:
    """Full inference chain for one 8-bit image."""
    return normalize_and_resize(to_unit_range(image), params, side)


class ImagePreprocessor(TransformerMixin, BaseEstimator):
    """Turn a list of 8-bit RGB images into a model-ready batch.

    Parameters
    ----------
    input_side : int
        Square side length the backbone expects.
    channel_means : tuple of float, default=IMAGENET_MEANS
        Per-channel means subtracted after scaling to [0, 1].
    dtype : str, default="float32"
        Output dtype of the batch.
    """

    def __init__(self, input_side=32, channel_means=IMAGENET_MEANS, dtype="float32"):
        self.input_side = input_side
        self.channel_means = channel_means
        self.dtype = dtype

    def fit(self, X, y=None):
        self.params_ = NormalizationParams(tuple(self.channel_means))
        if int(self.input_side) < 1:
            raise DimensionError(f"input_side must be positive, got {self.input_side}")
        return self

    def transform(self, X):
        params = getattr(self, "params_", None) or NormalizationParams(tuple(self.channel_means))
        batch = [preprocess_image(img, params, int(self.input_side)) for img in X]
        if not batch:
            return np.zeros((0, 3, int(self.input_side), int(self.input_side)), dtype=self.dtype)
        return np.stack(batch).astype(self.dtype)
