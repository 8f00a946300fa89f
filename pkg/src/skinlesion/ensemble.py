"""Per-image probability sets and their fusion across models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .dataset import NUM_CLASSES
from .exceptions import CoverageError, WeightError

SIMPLEX_TOL = 1e-6
_LOG_FLOOR = 1e-12


def check_probability_vector(vec, tol=SIMPLEX_TOL, name="") -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if v.shape != (NUM_CLASSES,):
        raise ValueError(f"{name}: expected {NUM_CLASSES} probabilities, got shape {v.shape}")
    if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
        raise ValueError(f"{name}: probabilities must lie in [0, 1], got {v.tolist()}")
    if abs(v.sum() - 1.0) > tol:
        raise ValueError(f"{name}: probabilities sum to {v.sum():.9f}, not 1 within {tol}")
    return v


@dataclass
class PredictionSet:
    source_name: str
    entries: dict = field(default_factory=dict)
    tolerance: float = SIMPLEX_TOL

    def __post_init__(self):
        self.entries = {
            str(k): check_probability_vector(v, self.tolerance, name=str(k)) for k, v in dict(self.entries).items()
        }

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, image_id):
        return self.entries[image_id]

    @property
    def image_ids(self):
        return sorted(self.entries)

    def to_array(self, image_ids=None):
        ids = self.image_ids if image_ids is None else list(image_ids)
        if not ids:
            return np.zeros((0, NUM_CLASSES))
        return np.stack([self.entries[i] for i in ids])

    @classmethod
    def from_array(cls, source_name, image_ids: Sequence[str], probabilities, tolerance=SIMPLEX_TOL):
        probabilities = np.asarray(probabilities, dtype=np.float64)
        if len(image_ids) != len(set(image_ids)):
            raise ValueError("image ids must be unique")
        if len(image_ids) != len(probabilities):
            raise ValueError("one probability row per image id required")
        return cls(source_name, dict(zip(image_ids, probabilities)), tolerance)


def _check_coverage(members):
    reference = set(members[0].entries)
    for m in members[1:]:
        ids = set(m.entries)
        if ids != reference:
            diff = reference ^ ids
            raise CoverageError(
                f"coverage mismatch: {m.source_name!r} and {members[0].source_name!r} cover different images "
                f"({len(diff)} differ, e.g. {sorted(diff)[:5]})",
                diff,
            )
    return sorted(reference)


def fuse(members: Sequence[PredictionSet], weights=None, mode="mean") -> PredictionSet:
    """Combine member probabilities per image.

    ``mode="mean"`` takes the weighted arithmetic mean; ``mode="geometric"``
    takes the weighted geometric mean (log-probabilities floored at 1e-12).
    The arithmetic mean is left unscaled: a convex combination of valid
    vectors is already valid, and a single member passes through unchanged
    even when it was read back from a rounded file.
    """
    members = list(members)
    if not members:
        raise ValueError("fuse needs at least one member")
    if weights is None:
        weights = [1.0] * len(members)
    weights = [float(w) for w in weights]
    if len(weights) != len(members):
        raise WeightError(f"{len(weights)} weights for {len(members)} members")
    if any(not (w > 0.0 and math.isfinite(w)) for w in weights):
        raise WeightError(f"weights must be positive and finite, got {weights}")
    if mode not in ("mean", "geometric"):
        raise ValueError(f"unknown fusion mode {mode!r}")

    ids = _check_coverage(members)
    total = math.fsum(weights)
    fused = {}
    for image_id in ids:
        vecs = [m.entries[image_id] for m in members]
        if mode == "mean":
            v = np.array([math.fsum(w * vec[k] for w, vec in zip(weights, vecs)) for k in range(NUM_CLASSES)])
            v = v / total
        else:
            logs = [np.log(np.maximum(vec, _LOG_FLOOR)) for vec in vecs]
            z = np.array([math.fsum(w * lv[k] for w, lv in zip(weights, logs)) for k in range(NUM_CLASSES)]) / total
            v = np.exp(z - z.max())
            v = v / v.sum()
        fused[image_id] = v
    name = "ensemble(" + ",".join(m.source_name for m in members) + ")"
    return PredictionSet(name, fused, tolerance=max(m.tolerance for m in members))


class ProbabilityEnsemble(ClassifierMixin, BaseEstimator):
    """Soft-voting ensemble over already fitted probabilistic classifiers.

    Parameters
    ----------
    estimators : list of (name, estimator)
        Fitted models exposing ``predict_proba`` over the seven classes.
    weights : list of float, optional
        Positive per-model weights; uniform when omitted.
    mode : {"mean", "geometric"}, default="mean"
    """

    def __init__(self, estimators, weights=None, mode="mean"):
        self.estimators = estimators
        self.weights = weights
        self.mode = mode

    def fit(self, X=None, y=None):
        self.classes_ = np.arange(NUM_CLASSES)
        return self

    def predict_proba(self, X):
        members = []
        for name, est in self.estimators:
            proba = np.asarray(est.predict_proba(X), dtype=np.float64)
            members.append(PredictionSet.from_array(name, [str(i) for i in range(len(proba))], proba))
        fused = fuse(members, self.weights, self.mode)
        return fused.to_array([str(i) for i in range(len(members[0]))])

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y, sample_weight=None):
        from .evaluate import balanced_accuracy_from_labels

        return balanced_accuracy_from_labels(y, self.predict(X))

