import numpy as np
import pytest
import torch
from PIL import Image

from skinlesion.dataset import LesionClass, SampleRecord, write_ground_truth

torch.set_num_threads(1)

# Class counts of the official 10015-image training table.
OFFICIAL_COUNTS = {
    LesionClass.MEL: 1113,
    LesionClass.NV: 6705,
    LesionClass.BCC: 514,
    LesionClass.AKIEC: 327,
    LesionClass.BKL: 1099,
    LesionClass.DF: 115,
    LesionClass.VASC: 142,
}


def textured_images(n, side=32, seed=0):
    """Distinct smooth colour fields with mild noise, as uint8 RGB."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    out = []
    for _ in range(n):
        base = rng.uniform(40, 215, size=3)
        slope = rng.uniform(-40, 40, size=(2, 3))
        img = base + yy[..., None] * slope[0] + xx[..., None] * slope[1] + rng.normal(0, 8, size=(side, side, 3))
        out.append(np.clip(img, 0, 255).astype(np.uint8))
    return out


def memory_records(classes, prefix="IMG"):
    return [SampleRecord.from_class(f"{prefix}_{i:04d}", f"/nonexistent/{prefix}_{i:04d}.png", c) for i, c in enumerate(classes)]


class MemoryLoader:
    def __init__(self, records, images):
        self.store = {r.image_id: img for r, img in zip(records, images)}

    def __call__(self, record):
        return self.store[record.image_id]


@pytest.fixture
def eight_fixture():
    """One record per class plus an extra NV, with in-memory 32x32 images."""
    classes = list(LesionClass) + [LesionClass.NV]
    records = memory_records(classes)
    images = textured_images(len(records), seed=11)
    return records, MemoryLoader(records, images)


def write_image_dataset(root, per_class, side=24, seed=0, ext=".png"):
    """Write ``per_class`` images per class plus a ground-truth CSV; returns (csv_path, records)."""
    root.mkdir(parents=True, exist_ok=True)
    classes = [c for c in LesionClass for _ in range(per_class)]
    images = textured_images(len(classes), side=side, seed=seed)
    records = []
    for i, (c, img) in enumerate(zip(classes, images)):
        image_id = f"ISIC_{i:07d}"
        Image.fromarray(img).save(root / f"{image_id}{ext}")
        records.append(SampleRecord.from_class(image_id, root / f"{image_id}{ext}", c))
    gt = root / "ground_truth.csv"
    write_ground_truth(records, gt)
    return gt, records


@pytest.fixture
def image_dataset(tmp_path):
    return write_image_dataset(tmp_path / "images", per_class=2)


# --- acceptance reporting -----------------------------------------------------

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[number] = (title, report.outcome, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcome, duration = _ACCEPTANCE[number]
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[{verdict}] criterion {number:2d}: {title} ({duration:.2f} s)")
