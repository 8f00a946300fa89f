"""Confusion matrices, challenge metrics and submission files."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import CLASS_CODES, GROUND_TRUTH_HEADER, LesionClass, NUM_CLASSES, SampleRecord, read_class_table
from .ensemble import PredictionSet
from .exceptions import CoverageError, EmptyInputError, MalformedLabelError, PersistenceError

logger = logging.getLogger(__name__)

# Seven values printed to 6 decimals can miss 1 by up to 3.5e-6.
SUBMISSION_TOL = 4e-6


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (NUM_CLASSES, NUM_CLASSES) or (counts < 0).any():
            raise ValueError(f"confusion counts must be a non-negative {NUM_CLASSES}x{NUM_CLASSES} grid")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_labels(cls, y_true, y_pred):
        counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    per_class: dict
    confusion: ConfusionMatrix
    n: int

    def to_dict(self):
        return {
            "n": self.n,
            "balanced_accuracy": self.balanced_accuracy,
            "accuracy": self.accuracy,
            "per_class": {
                c.name: {"sensitivity": sens, "specificity": spec} for c, (sens, spec) in self.per_class.items()
            },
            "confusion": {"classes": list(CLASS_CODES), "counts": self.confusion.counts.tolist()},
        }

    def to_text(self):
        def fmt(x):
            return "   n/a" if x is None else f"{x:6.4f}"

        lines = [
            f"balanced accuracy: {self.balanced_accuracy:.4f}",
            f"accuracy:          {self.accuracy:.4f}",
            f"images:            {self.n}",
            "",
            "class  sensitivity  specificity",
        ]
        for c, (sens, spec) in self.per_class.items():
            lines.append(f"{c.name:<6} {fmt(sens):>11}  {fmt(spec):>11}")
        lines += ["", "confusion (rows true, columns predicted)", "       " + " ".join(f"{c:>6}" for c in CLASS_CODES)]
        for c, row in zip(CLASS_CODES, self.confusion.counts):
            lines.append(f"{c:<6} " + " ".join(f"{v:>6d}" for v in row))
        return "\n".join(lines) + "\n"


def predicted_labels(probabilities, image_ids=None) -> np.ndarray:
    """Row argmax; ties go to the lowest class ordinal and are logged."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    winners = probabilities.argmax(axis=1)
    tied = (probabilities == probabilities.max(axis=1, keepdims=True)).sum(axis=1) > 1
    for row in np.flatnonzero(tied):
        who = image_ids[row] if image_ids is not None else row
        logger.info("argmax tie for %s resolved to %s", who, CLASS_CODES[winners[row]])
    return winners


def confusion(predictions: PredictionSet, truth: Sequence[SampleRecord]) -> ConfusionMatrix:
    missing = [r.image_id for r in truth if r.image_id not in predictions.entries]
    if missing:
        raise CoverageError(f"{len(missing)} truth image(s) lack predictions, e.g. {missing[:5]}", missing)
    ids = [r.image_id for r in truth]
    if not ids:
        return ConfusionMatrix(np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))
    pred = predicted_labels(predictions.to_array(ids), ids)
    true = [int(r.lesion_class) for r in truth]
    return ConfusionMatrix.from_labels(true, pred)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyInputError("confusion matrix is empty")
    return int(np.trace(cm.counts)) / cm.total


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Mean recall over the classes that occur in the truth."""
    if cm.total == 0:
        raise EmptyInputError("confusion matrix is empty")
    support = cm.counts.sum(axis=1)
    present = np.flatnonzero(support)
    absent = [CLASS_CODES[c] for c in range(NUM_CLASSES) if support[c] == 0]
    if absent:
        logger.warning("classes absent from truth, excluded from balanced accuracy: %s", ",".join(absent))
    recalls = [int(cm.counts[c, c]) / int(support[c]) for c in present]
    return float(sum(recalls) / len(recalls))


def per_class_metrics(cm: ConfusionMatrix) -> dict:
    """One-vs-rest ``(sensitivity, specificity)`` per class; ``None`` where a denominator is 0."""
    counts = cm.counts
    total = int(counts.sum())
    out = {}
    for c in LesionClass:
        tp = int(counts[c, c])
        fn = int(counts[c, :].sum()) - tp
        fp = int(counts[:, c].sum()) - tp
        tn = total - tp - fn - fp
        sens = tp / (tp + fn) if tp + fn else None
        spec = tn / (tn + fp) if tn + fp else None
        out[c] = (sens, spec)
    return out


def evaluate_predictions(predictions: PredictionSet, truth: Sequence[SampleRecord]) -> MetricsReport:
    cm = confusion(predictions, truth)
    return MetricsReport(accuracy(cm), balanced_accuracy(cm), per_class_metrics(cm), cm, cm.total)


def balanced_accuracy_from_labels(y_true, y_pred) -> float:
    return balanced_accuracy(ConfusionMatrix.from_labels(y_true, y_pred))


def write_text_atomic(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise PersistenceError(f"could not write {path}: {exc}") from exc


def format_submission(predictions: PredictionSet) -> str:
    lines = [",".join(GROUND_TRUTH_HEADER)]
    for image_id in predictions.image_ids:
        lines.append(image_id + "," + ",".join(f"{p:.6f}" for p in predictions.entries[image_id]))
    return "\n".join(lines) + "\n"


def write_submission(predictions: PredictionSet, path):
    """Write the challenge CSV: fixed header, rows sorted by id, 6 decimals."""
    write_text_atomic(path, format_submission(predictions))


def read_submission(path, source_name=None) -> PredictionSet:
    entries = {}
    for row_number, image_id, cells in read_class_table(path):
        try:
            vec = [float(c) for c in cells]
        except ValueError:
            raise MalformedLabelError(f"{path} row {row_number}: non-numeric probability", row=row_number) from None
        if image_id in entries:
            raise MalformedLabelError(f"{path} row {row_number}: duplicate image id {image_id!r}", row=row_number)
        entries[image_id] = vec
    try:
        return PredictionSet(source_name or Path(path).stem, entries, tolerance=SUBMISSION_TOL)
    except ValueError as exc:
        raise MalformedLabelError(f"{path}: {exc}") from None


def write_report(report: MetricsReport, directory, stem="metrics"):
    directory = Path(directory)
    write_text_atomic(directory / f"{stem}.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    write_text_atomic(directory / f"{stem}.txt", report.to_text())
    return directory / f"{stem}.json", directory / f"{stem}.txt"
