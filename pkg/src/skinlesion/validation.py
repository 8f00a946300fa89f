"""Input checks shared by the estimator wrappers."""

import numpy as np

from .dataset import CLASS_CODES, NUM_CLASSES
from .exceptions import ChannelError, LabelError


def check_images(X, name="X"):
    """Return ``X`` as a list of ``(H, W, 3)`` uint8 arrays.

    Accepts a 4-D array or any sequence of 3-D arrays; sizes may differ
    between images.
    """
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    if isinstance(X, np.ndarray) or not hasattr(X, "__len__"):
        raise ValueError(f"{name} must be a sequence of images or an (N, H, W, 3) array")
    out = []
    for i, img in enumerate(X):
        img = np.asarray(img)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ChannelError(f"{name}[{i}] has shape {img.shape}; expected (H, W, 3)")
        if img.dtype != np.uint8:
            if not np.issubdtype(img.dtype, np.integer) or img.min() < 0 or img.max() > 255:
                raise ValueError(f"{name}[{i}] must hold 8-bit pixel values")
            img = img.astype(np.uint8)
        out.append(img)
    if not out:
        raise ValueError(f"{name} is empty")
    return out


def check_labels(y, n_samples=None):
    """Class ordinals from ordinals, class codes or one-hot rows."""
    y = np.asarray(y)
    if y.ndim == 2:
        if y.shape[1] != NUM_CLASSES or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
            raise LabelError(f"2-D labels must be one-hot rows of width {NUM_CLASSES}")
        y = y.argmax(axis=1)
    elif y.dtype.kind in "USO":
        lookup = {code: i for i, code in enumerate(CLASS_CODES)}
        try:
            y = np.array([lookup[str(v)] for v in y])
        except KeyError as exc:
            raise LabelError(f"unknown class code {exc.args[0]!r}") from None
    y = np.asarray(y)
    if y.ndim != 1 or (y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= NUM_CLASSES)):
        raise LabelError(f"labels must be class ordinals in [0, {NUM_CLASSES})")
    if n_samples is not None and len(y) != n_samples:
        raise ValueError(f"got {len(y)} labels for {n_samples} images")
    return y.astype(np.int64)
