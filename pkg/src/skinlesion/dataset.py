"""Ground-truth ingestion, class distribution and deterministic splits."""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .exceptions import (
    DuplicationError,
    InsufficientClassError,
    MalformedLabelError,
    SchemaError,
)

logger = logging.getLogger(__name__)

LABEL_TOLERANCE = 1e-9
DEFAULT_EXTENSION = ".jpg"


class LesionClass(enum.IntEnum):
    """The seven diagnostic categories, in ground-truth column order."""

    MEL = 0
    NV = 1
    BCC = 2
    AKIEC = 3
    BKL = 4
    DF = 5
    VASC = 6


CLASS_CODES = tuple(c.name for c in LesionClass)
NUM_CLASSES = len(CLASS_CODES)
GROUND_TRUTH_HEADER = ("image",) + CLASS_CODES


def one_hot(lesion_class, num_classes=NUM_CLASSES):
    vec = np.zeros(num_classes, dtype=np.int64)
    vec[int(lesion_class)] = 1
    return vec


@dataclass(frozen=True)
class SampleRecord:
    image_id: str
    image_path: Path
    label: tuple

    def __post_init__(self):
        label = tuple(int(v) for v in self.label)
        if len(label) != NUM_CLASSES or sorted(label) != [0] * (NUM_CLASSES - 1) + [1]:
            raise MalformedLabelError(f"{self.image_id}: label {label} is not one-hot over {NUM_CLASSES} classes")
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "image_path", Path(self.image_path))

    @property
    def lesion_class(self) -> LesionClass:
        return LesionClass(self.label.index(1))

    @classmethod
    def from_class(cls, image_id, image_path, lesion_class):
        return cls(image_id, image_path, tuple(one_hot(lesion_class)))


@dataclass(frozen=True)
class ClassDistribution:
    counts: dict
    total: int

    def __post_init__(self):
        if sum(self.counts.values()) != self.total:
            raise ValueError("total must equal the sum of counts")

    def __getitem__(self, lesion_class):
        return self.counts[LesionClass(lesion_class)]

    def as_table(self) -> str:
        lines = ["class,count"]
        lines += [f"{c.name},{self.counts[c]}" for c in LesionClass]
        lines.append(f"TOTAL,{self.total}")
        return "\n".join(lines) + "\n"


def _check_header(header: Sequence[str]):
    header = [h.strip() for h in header]
    expected = list(GROUND_TRUTH_HEADER)
    missing = [c for c in expected if c not in header]
    if missing:
        raise SchemaError(f"missing column {missing[0]!r}", column=missing[0])
    extra = [c for c in header if c not in expected]
    if extra:
        raise SchemaError(f"unexpected column {extra[0]!r}", column=extra[0])
    if len(header) != len(set(header)):
        dup = next(c for c in header if header.count(c) > 1)
        raise SchemaError(f"column {dup!r} appears more than once", column=dup)
    for got, want in zip(header, expected):
        if got != want:
            raise SchemaError(f"column {got!r} out of order; expected {want!r} at that position", column=got)


def parse_label_cells(cells: Sequence[str], row: int) -> tuple:
    """Parse seven numeric cells and snap them to a one-hot tuple."""
    try:
        values = [float(c) for c in cells]
    except ValueError as exc:
        raise MalformedLabelError(f"row {row}: non-numeric label cell ({exc})", row=row) from None
    snapped = []
    for v in values:
        if abs(v) <= LABEL_TOLERANCE:
            snapped.append(0)
        elif abs(v - 1.0) <= LABEL_TOLERANCE:
            snapped.append(1)
        else:
            raise MalformedLabelError(f"row {row}: label value {v!r} outside {{0, 1}}", row=row)
    if sum(snapped) != 1:
        raise MalformedLabelError(f"row {row}: label values sum to {sum(values)!r}, expected 1", row=row)
    return tuple(snapped)


def read_class_table(path, check_header=_check_header):
    """Yield ``(row_number, image_id, cells)`` from a header-checked class table.

    Row numbers are 1-based file lines, so the first data row is row 2.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header") from None
        check_header(header)
        for row_number, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(GROUND_TRUTH_HEADER):
                raise MalformedLabelError(
                    f"row {row_number}: expected {len(GROUND_TRUTH_HEADER)} cells, got {len(row)}", row=row_number
                )
            yield row_number, row[0].strip(), row[1:]


def load_ground_truth(path, image_root, extension=DEFAULT_EXTENSION) -> list[SampleRecord]:
    """Parse a ground-truth table into records, preserving file order."""
    image_root = Path(image_root)
    records = []
    seen = {}
    for row_number, image_id, cells in read_class_table(path):
        label = parse_label_cells(cells, row_number)
        if image_id in seen:
            raise DuplicationError(f"image id {image_id!r} on row {row_number} already seen on row {seen[image_id]}")
        seen[image_id] = row_number
        records.append(SampleRecord(image_id, image_root / f"{image_id}{extension}", label))
    return records


def load_ground_truth_files(paths: Iterable, image_root, extension=DEFAULT_EXTENSION) -> list[SampleRecord]:
    """Concatenate several ground-truth files; ids must stay unique across all of them."""
    records = []
    for path in paths:
        records.extend(load_ground_truth(path, image_root, extension))
    ids = [r.image_id for r in records]
    if len(ids) != len(set(ids)):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DuplicationError(f"image ids repeated across ground-truth files: {dup[:5]}")
    return records


def write_ground_truth(records: Sequence[SampleRecord], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GROUND_TRUTH_HEADER)
        for r in records:
            writer.writerow([r.image_id] + [f"{float(v):.1f}" for v in r.label])


def class_distribution(records: Iterable[SampleRecord]) -> ClassDistribution:
    counts = {c: 0 for c in LesionClass}
    total = 0
    for r in records:
        counts[r.lesion_class] += 1
        total += 1
    return ClassDistribution(counts, total)


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def stratified_split(records: Sequence[SampleRecord], holdout_fraction: float, seed: int):
    """Split records per class into ``(train, holdout)``.

    Each class sends ``round(count * holdout_fraction)`` records to the holdout,
    at least one and at most ``count - 1``. Both outputs keep input order.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
    by_class = {c: [] for c in LesionClass}
    for i, r in enumerate(records):
        by_class[r.lesion_class].append(i)
    for c, idx in by_class.items():
        if len(idx) < 2:
            raise InsufficientClassError(f"class {c.name} has {len(idx)} record(s); at least 2 required", c)

    rng = np.random.default_rng(seed)
    held = set()
    for c in LesionClass:
        idx = np.asarray(by_class[c])
        k = min(max(1, _round_half_up(len(idx) * holdout_fraction)), len(idx) - 1)
        held.update(int(i) for i in rng.permutation(idx)[:k])

    train = [r for i, r in enumerate(records) if i not in held]
    holdout = [r for i, r in enumerate(records) if i in held]
    return train, holdout


def load_image(path) -> np.ndarray:
    """Decode an image file to an ``(H, W, 3)`` uint8 RGB array."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


@dataclass
class VerificationReport:
    missing: list = field(default_factory=list)
    unreadable: list = field(default_factory=list)

    def __bool__(self):
        return bool(self.missing or self.unreadable)

    def __len__(self):
        return len(self.missing) + len(self.unreadable)

    @property
    def image_ids(self):
        return sorted(self.missing + self.unreadable)

    def lines(self):
        tagged = [(i, "MISSING") for i in self.missing] + [(i, "UNREADABLE") for i in self.unreadable]
        return [f"{tag} {image_id}" for image_id, tag in sorted(tagged)]

    def to_text(self):
        return "".join(line + "\n" for line in self.lines())


def _probe(record: SampleRecord):
    path = record.image_path
    if not path.exists():
        return "MISSING"
    try:
        with Image.open(path) as img:
            img.load()
    except Exception:  # any decoder failure counts as unreadable
        return "UNREADABLE"
    return None


def verify_images(records: Sequence[SampleRecord], n_jobs=None) -> VerificationReport:
    """Report every record whose image is missing or cannot be decoded."""
    n_jobs = n_jobs or min(8, os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        status = list(pool.map(_probe, records))
    report = VerificationReport()
    for record, s in sorted(zip(records, status), key=lambda rs: rs[0].image_id):
        if s == "MISSING":
            report.missing.append(record.image_id)
        elif s == "UNREADABLE":
            report.unreadable.append(record.image_id)
    return report
