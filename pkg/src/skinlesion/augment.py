"""Seeded image augmentation and class-balanced epoch sampling.

Augmentation runs on ``(H, W, 3)`` images already scaled to [0, 1] and
before mean subtraction. Operators are sampled in a fixed order:

    rotation -> shear -> zoom -> aspect -> shift -> crop
    -> horizontal flip -> vertical flip -> brightness -> contrast -> jitter

Every draw happens regardless of whether the sampled value is an identity,
so a given seed always lines up with the same parameters.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .dataset import ClassDistribution, LesionClass, NUM_CLASSES, SampleRecord
from .exceptions import ConsistencyError, EmptyClassError, SpecError
from .preprocess import check_rgb

_RANGE_FIELDS = (
    "rotation_degrees",
    "crop_fraction",
    "brightness_delta",
    "contrast_factor",
    "aspect_ratio",
    "shear_degrees",
    "zoom_factor",
    "shift_fraction",
)
_SNAP_TOL = 1e-9


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_degrees: tuple = (-30.0, 30.0)
    horizontal_flip_prob: float = 0.5
    vertical_flip_prob: float = 0.5
    crop_fraction: tuple = (0.8, 1.0)
    brightness_delta: tuple = (-0.1, 0.1)
    contrast_factor: tuple = (0.9, 1.1)
    jitter_amplitude: float = 0.02
    aspect_ratio: tuple = (0.9, 1.1)
    shear_degrees: tuple = (-10.0, 10.0)
    zoom_factor: tuple = (0.9, 1.1)
    shift_fraction: tuple = (-0.1, 0.1)

    def __post_init__(self):
        for name in _RANGE_FIELDS:
            value = getattr(self, name)
            if np.isscalar(value):
                value = (value, value)
            lo, hi = (float(v) for v in value)
            if not lo <= hi:
                raise SpecError(f"{name}: low {lo} exceeds high {hi}")
            object.__setattr__(self, name, (lo, hi))
        for name in ("horizontal_flip_prob", "vertical_flip_prob"):
            p = float(getattr(self, name))
            if not 0.0 <= p <= 1.0:
                raise SpecError(f"{name} must lie in [0, 1], got {p}")
            object.__setattr__(self, name, p)
        if not float(self.jitter_amplitude) >= 0.0:
            raise SpecError(f"jitter_amplitude must be >= 0, got {self.jitter_amplitude}")
        object.__setattr__(self, "jitter_amplitude", float(self.jitter_amplitude))
        lo, hi = self.crop_fraction
        if not (0.0 < lo and hi <= 1.0):
            raise SpecError(f"crop_fraction must lie in (0, 1], got {self.crop_fraction}")
        for name in ("contrast_factor", "aspect_ratio", "zoom_factor"):
            if getattr(self, name)[0] <= 0.0:
                raise SpecError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def identity(cls, **overrides):
        """A spec whose every operator is a no-op, with optional overrides."""
        base = dict(
            rotation_degrees=(0.0, 0.0),
            horizontal_flip_prob=0.0,
            vertical_flip_prob=0.0,
            crop_fraction=(1.0, 1.0),
            brightness_delta=(0.0, 0.0),
            contrast_factor=(1.0, 1.0),
            jitter_amplitude=0.0,
            aspect_ratio=(1.0, 1.0),
            shear_degrees=(0.0, 0.0),
            zoom_factor=(1.0, 1.0),
            shift_fraction=(0.0, 0.0),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def as_generator(rng_state) -> np.random.Generator:
    """Accept a Generator, a SeedSequence or an integer seed."""
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``, e.g. ``(epoch_seed, sample_index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


# --- photometric operators --------------------------------------------------


def adjust_brightness(image, delta):
    return image + delta


def adjust_contrast(image, factor):
    mean = image.mean()
    return (image - mean) * factor + mean


def horizontal_flip(image):
    return image[:, ::-1].copy()


def vertical_flip(image):
    return image[::-1].copy()


# --- geometric operators ----------------------------------------------------


def _rotation(degrees):
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    # (row, col) coordinates; positive angles turn content counter-clockwise.
    return np.array([[c, -s], [s, c]])


def _shear(degrees):
    return np.array([[1.0, 0.0], [math.tan(math.radians(degrees)), 1.0]])


def _reflect_index(idx, n):
    """Half-sample symmetric reflection, matching ``scipy.ndimage`` mode ``reflect``."""
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def warp(image, inverse_matrix, offset):
    """Sample ``image`` at ``inverse_matrix @ (r, c) + offset`` for every output pixel.

    Integer-valued maps (identity, flips, quarter turns, whole-pixel shifts)
    are gathered exactly; anything else is bilinear with reflection padding.
    """
    h, w = image.shape[:2]
    m = np.asarray(inverse_matrix, dtype=np.float64)
    off = np.asarray(offset, dtype=np.float64)
    rm, ro = np.round(m), np.round(off)
    if np.all(np.abs(m - rm) <= _SNAP_TOL) and np.all(np.abs(off - ro) <= _SNAP_TOL):
        if np.array_equal(rm, np.eye(2)) and not ro.any():
            return image.copy()
        rows, cols = np.indices((h, w))
        src_r = rm[0, 0] * rows + rm[0, 1] * cols + ro[0]
        src_c = rm[1, 0] * rows + rm[1, 1] * cols + ro[1]
        src_r = _reflect_index(src_r.astype(np.int64), h)
        src_c = _reflect_index(src_c.astype(np.int64), w)
        return image[src_r, src_c]
    out = np.empty_like(image, dtype=np.float64)
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.affine_transform(
            image[..., ch].astype(np.float64), m, offset=off, order=1, mode="reflect"
        )
    return out


@dataclass(frozen=True)
class AugmentationParams:
    """Concrete parameter values drawn for one image."""

    rotation: float
    shear: float
    zoom: float
    aspect: float
    shift_x: float
    shift_y: float
    crop: float
    crop_top: int
    crop_left: int
    crop_height: int
    crop_width: int
    hflip: bool
    vflip: bool
    brightness: float
    contrast: float


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def sample_params(shape, spec: AugmentationSpec, rng: np.random.Generator) -> AugmentationParams:
    h, w = shape[:2]
    rotation = rng.uniform(*spec.rotation_degrees)
    shear = rng.uniform(*spec.shear_degrees)
    zoom = rng.uniform(*spec.zoom_factor)
    aspect = rng.uniform(*spec.aspect_ratio)
    shift_x = rng.uniform(*spec.shift_fraction)
    shift_y = rng.uniform(*spec.shift_fraction)
    crop = rng.uniform(*spec.crop_fraction)
    ch, cw = _round_half_up(crop * h), _round_half_up(crop * w)
    if ch < 1 or cw < 1:
        raise SpecError(f"crop fraction {crop:.4g} leaves a {ch}x{cw} crop of a {h}x{w} image")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    hflip = bool(rng.random() < spec.horizontal_flip_prob)
    vflip = bool(rng.random() < spec.vertical_flip_prob)
    brightness = rng.uniform(*spec.brightness_delta)
    contrast = rng.uniform(*spec.contrast_factor)
    return AugmentationParams(
        rotation, shear, zoom, aspect, shift_x, shift_y, crop, top, left, ch, cw, hflip, vflip, brightness, contrast
    )


def geometric_map(shape, params: AugmentationParams):
    """Inverse ``(matrix, offset)`` for the rotation/shear/zoom/aspect/shift stack."""
    h, w = shape[:2]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    sqrt_aspect = math.sqrt(params.aspect)
    forward = (
        np.diag([1.0 / sqrt_aspect, sqrt_aspect])
        @ (params.zoom * np.eye(2))
        @ _shear(params.shear)
        @ _rotation(params.rotation)
    )
    shift = np.array([params.shift_y * h, params.shift_x * w])
    inverse = np.linalg.inv(forward)
    offset = center - inverse @ (center + shift)
    return inverse, offset


def apply_augmentation(image, spec: AugmentationSpec, rng_state) -> np.ndarray:
    """Augment one [0, 1] image; the output is clamped to [0, 1].

    ``rng_state`` may be an integer seed, a ``SeedSequence`` or a
    ``Generator``; a Generator is advanced in place.
    """
    image = check_rgb(image)
    rng = as_generator(rng_state)
    p = sample_params(image.shape, spec, rng)

    out = warp(image, *geometric_map(image.shape, p))
    out = out[p.crop_top : p.crop_top + p.crop_height, p.crop_left : p.crop_left + p.crop_width]
    if p.hflip:
        out = horizontal_flip(out)
    if p.vflip:
        out = vertical_flip(out)
    if p.brightness != 0.0:
        out = adjust_brightness(out, p.brightness)
    if p.contrast != 1.0:
        out = adjust_contrast(out, p.contrast)
    if spec.jitter_amplitude > 0.0:
        amp = spec.jitter_amplitude
        out = out + rng.uniform(-amp, amp, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def augment_batch(images: Sequence, spec: AugmentationSpec, seed: int, n_jobs: int = 1, start_index: int = 0):
    """Augment a batch with one derived stream per sample.

    Sample ``i`` always uses ``derive_rng(seed, start_index + i)``, so the
    result does not depend on ``n_jobs``.
    """

    def one(i):
        return apply_augmentation(images[i], spec, derive_rng(seed, start_index + i))

    if n_jobs is None or n_jobs <= 1:
        return [one(i) for i in range(len(images))]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(one, range(len(images))))


class RandomAugmenter(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`augment_batch`.

    ``transform`` takes a list of [0, 1] RGB images and returns a list, since
    random crops change image sizes. Each call advances an internal counter so
    repeated calls draw fresh parameters; ``fit`` resets it.
    """

    def __init__(self, spec=None, seed=0, n_jobs=1):
        self.spec = spec
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        self.spec_ = self.spec if isinstance(self.spec, AugmentationSpec) else AugmentationSpec(**(self.spec or {}))
        self.calls_ = 0
        return self

    def transform(self, X):
        if not hasattr(self, "spec_"):
            self.fit(X)
        out = augment_batch(list(X), self.spec_, derive_rng(self.seed, self.calls_).integers(2**63), self.n_jobs)
        self.calls_ += 1
        return out


# --- minority oversampling --------------------------------------------------


@dataclass(frozen=True)
class OversamplePlan:
    draws: dict
    epoch_size: int

    def __post_init__(self):
        draws = {LesionClass(c): int(n) for c, n in self.draws.items()}
        if any(n < 0 for n in draws.values()):
            raise ValueError("draw counts must be non-negative")
        if sum(draws.values()) != self.epoch_size:
            raise ValueError(f"draw counts sum to {sum(draws.values())}, epoch_size is {self.epoch_size}")
        object.__setattr__(self, "draws", {c: draws.get(c, 0) for c in LesionClass})

    def __getitem__(self, lesion_class):
        return self.draws[LesionClass(lesion_class)]


def build_oversample_plan(distribution: ClassDistribution, epoch_size: int, balance: float = 1.0) -> OversamplePlan:
    """Split ``epoch_size`` draws across the seven classes.

    With ``balance=1`` (default) every class gets ``epoch_size // 7`` and the
    remainder goes one apiece to the classes with the fewest source images.
    Lower ``balance`` moves shares toward the source proportions
    (``share ~ count ** (1 - balance)``); 0 reproduces them.
    """
    empty = [c.name for c in LesionClass if distribution[c] < 1]
    if empty:
        raise EmptyClassError(f"class {empty[0]} has no source images", empty[0])
    if int(epoch_size) < NUM_CLASSES:
        raise ValueError(f"epoch_size must be at least {NUM_CLASSES}, got {epoch_size}")
    if not 0.0 <= balance <= 1.0:
        raise ValueError(f"balance must lie in [0, 1], got {balance}")

    epoch_size = int(epoch_size)
    if balance == 1.0:
        draws = {c: epoch_size // NUM_CLASSES for c in LesionClass}
    else:
        weights = {c: distribution[c] ** (1.0 - balance) for c in LesionClass}
        total = sum(weights.values())
        draws = {c: int(math.floor(epoch_size * weights[c] / total)) for c in LesionClass}
    remainder = epoch_size - sum(draws.values())
    for c in sorted(LesionClass, key=lambda c: (distribution[c], int(c)))[:remainder]:
        draws[c] += 1
    return OversamplePlan(draws, epoch_size)


def sample_epoch(records: Sequence[SampleRecord], plan: OversamplePlan, rng_state) -> np.ndarray:
    """Ordered record indices for one epoch, class counts exactly per ``plan``."""
    rng = as_generator(rng_state)
    by_class = {c: [] for c in LesionClass}
    for i, r in enumerate(records):
        by_class[r.lesion_class].append(i)

    chunks = []
    for c in LesionClass:
        want, pool = plan[c], np.asarray(by_class[c], dtype=np.int64)
        if want and not len(pool):
            raise ConsistencyError(f"plan draws {want} from class {c.name} but no records carry it")
        if want:
            chunks.append(rng.choice(pool, size=want, replace=want > len(pool)))
    if not chunks:
        return np.zeros(0, dtype=np.int64)
    return rng.permutation(np.concatenate(chunks))
