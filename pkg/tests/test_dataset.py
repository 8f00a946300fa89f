from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skinlesion.dataset import (
    GROUND_TRUTH_HEADER,
    LesionClass,
    SampleRecord,
    class_distribution,
    load_ground_truth,
    load_ground_truth_files,
    stratified_split,
    verify_images,
    write_ground_truth,
)
from skinlesion.exceptions import DuplicationError, InsufficientClassError, MalformedLabelError, SchemaError

from conftest import OFFICIAL_COUNTS, memory_records

HEADER = ",".join(GROUND_TRUTH_HEADER)


def write_csv(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_lesion_class_order():
    assert [c.name for c in LesionClass] == ["MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"]
    assert [int(c) for c in LesionClass] == list(range(7))


def test_single_row_reads_one_hot_at_mel(tmp_path):
    gt = write_csv(tmp_path / "gt.csv", [HEADER, "ISIC_0000000,1.0,0.0,0.0,0.0,0.0,0.0,0.0"])
    (rec,) = load_ground_truth(gt, tmp_path / "img")
    assert rec.image_id == "ISIC_0000000"
    assert rec.label == (1, 0, 0, 0, 0, 0, 0)
    assert rec.lesion_class == LesionClass.MEL
    assert rec.image_path == tmp_path / "img" / "ISIC_0000000.jpg"


def test_extension_is_configurable(tmp_path):
    gt = write_csv(tmp_path / "gt.csv", [HEADER, "a,0,0,0,0,0,0,1"])
    (rec,) = load_ground_truth(gt, tmp_path, extension=".png")
    assert rec.image_path.name == "a.png"
    assert rec.lesion_class == LesionClass.VASC


def test_missing_column_named(tmp_path):
    header = HEADER.replace(",NV", "")
    gt = write_csv(tmp_path / "gt.csv", [header, "x,1,0,0,0,0,0"])
    with pytest.raises(SchemaError, match="'NV'") as info:
        load_ground_truth(gt, tmp_path)
    assert info.value.column == "NV"


def test_extra_column_named(tmp_path):
    gt = write_csv(tmp_path / "gt.csv", [HEADER + ",UNK", "x,1,0,0,0,0,0,0,0"])
    with pytest.raises(SchemaError) as info:
        load_ground_truth(gt, tmp_path)
    assert info.value.column == "UNK"


def test_reordered_columns_rejected(tmp_path):
    header = "image,NV,MEL,BCC,AKIEC,BKL,DF,VASC"
    gt = write_csv(tmp_path / "gt.csv", [header, "x,1,0,0,0,0,0,0"])
    with pytest.raises(SchemaError):
        load_ground_truth(gt, tmp_path)


@pytest.mark.parametrize(
    "row",
    [
        "x,1,1,0,0,0,0,0",
        "x,0,0,0,0,0,0,0",
        "x,0.5,0.5,0,0,0,0,0",
        "x,2,-1,0,0,0,0,0",
        "x,abc,0,0,0,0,0,0",
    ],
)
def test_malformed_label_reports_row(tmp_path, row):
    gt = write_csv(tmp_path / "gt.csv", [HEADER, "ok,1,0,0,0,0,0,0", row])
    with pytest.raises(MalformedLabelError) as info:
        load_ground_truth(gt, tmp_path)
    assert info.value.row == 3


def test_label_tolerance_snaps(tmp_path):
    gt = write_csv(tmp_path / "gt.csv", [HEADER, "x,1.0000000001,0,0,0,0,0,1e-10"])
    (rec,) = load_ground_truth(gt, tmp_path)
    assert rec.label == (1, 0, 0, 0, 0, 0, 0)


def test_duplicate_id_rejected(tmp_path):
    gt = write_csv(tmp_path / "gt.csv", [HEADER, "x,1,0,0,0,0,0,0", "x,0,1,0,0,0,0,0"])
    with pytest.raises(DuplicationError):
        load_ground_truth(gt, tmp_path)


def test_merge_files_and_cross_file_duplicates(tmp_path):
    a = write_csv(tmp_path / "a.csv", [HEADER, "x,1,0,0,0,0,0,0"])
    b = write_csv(tmp_path / "b.csv", [HEADER, "y,0,1,0,0,0,0,0"])
    assert [r.image_id for r in load_ground_truth_files([a, b], tmp_path)] == ["x", "y"]
    with pytest.raises(DuplicationError):
        load_ground_truth_files([a, a], tmp_path)


def test_write_read_round_trip_preserves_order(tmp_path):
    records = memory_records([LesionClass.DF, LesionClass.MEL, LesionClass.VASC])
    write_ground_truth(records, tmp_path / "gt.csv")
    back = load_ground_truth(tmp_path / "gt.csv", "/nonexistent", extension=".png")
    assert [(r.image_id, r.label) for r in back] == [(r.image_id, r.label) for r in records]


def test_synthetic_official_table_counts(tmp_path):
    classes = [c for c, n in OFFICIAL_COUNTS.items() for _ in range(n)]
    write_ground_truth(memory_records(classes), tmp_path / "gt.csv")
    dist = class_distribution(load_ground_truth(tmp_path / "gt.csv", tmp_path))
    assert dist.total == 10015
    assert dist.counts == OFFICIAL_COUNTS


def test_distribution_empty_and_single_class():
    empty = class_distribution([])
    assert empty.total == 0 and all(v == 0 for v in empty.counts.values())
    three = class_distribution(memory_records([LesionClass.NV] * 3))
    assert three.total == 3
    assert three.counts == {c: (3 if c == LesionClass.NV else 0) for c in LesionClass}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 6), max_size=40))
def test_distribution_total_matches_brute_force(labels):
    dist = class_distribution(memory_records(labels))
    assert dist.total == len(labels)
    tally = Counter(labels)
    assert all(dist.counts[c] == tally.get(int(c), 0) for c in LesionClass)


def test_split_exact_rounding_and_partition():
    records = memory_records([c for c in LesionClass for _ in range(10)])
    train, holdout = stratified_split(records, 0.2, seed=3)
    assert len(holdout) == 14 and len(train) == 56
    assert Counter(r.lesion_class for r in holdout) == {c: 2 for c in LesionClass}
    # brute-force partition check
    train_ids = {r.image_id for r in train}
    hold_ids = {r.image_id for r in holdout}
    assert not train_ids & hold_ids
    assert train_ids | hold_ids == {r.image_id for r in records}


def test_split_deterministic_and_seed_sensitive():
    records = memory_records([c for c in LesionClass for _ in range(20)])
    a = stratified_split(records, 0.25, seed=7)
    assert a == stratified_split(records, 0.25, seed=7)
    holdouts = {tuple(r.image_id for r in stratified_split(records, 0.25, seed=s)[1]) for s in range(10)}
    assert len(holdouts) > 1


def test_split_minimum_one_per_class():
    records = memory_records([c for c in LesionClass for _ in range(3)])
    _, holdout = stratified_split(records, 0.01, seed=0)
    assert Counter(r.lesion_class for r in holdout) == {c: 1 for c in LesionClass}


def test_split_keeps_one_training_record_per_class():
    records = memory_records([c for c in LesionClass for _ in range(2)])
    train, holdout = stratified_split(records, 0.9, seed=0)
    assert len(train) == len(holdout) == 7


def test_split_insufficient_class_named():
    classes = [c for c in LesionClass for _ in range(2)]
    classes.remove(LesionClass.DF)
    records = memory_records(classes)
    with pytest.raises(InsufficientClassError, match="DF"):
        stratified_split(records, 0.5, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(2, 12), min_size=7, max_size=7), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_split_is_partition_property(counts, fraction, seed):
    records = memory_records([c for c, n in zip(LesionClass, counts) for _ in range(n)])
    train, holdout = stratified_split(records, fraction, seed)
    assert len(train) + len(holdout) == len(records)
    assert {r.image_id for r in train}.isdisjoint(r.image_id for r in holdout)


def test_record_rejects_non_one_hot():
    with pytest.raises(MalformedLabelError):
        SampleRecord("x", "x.jpg", (1, 1, 0, 0, 0, 0, 0))


def test_verify_images_reports(image_dataset, tmp_path):
    _, records = image_dataset
    assert not verify_images(records)
    records[0].image_path.unlink()
    records[1].image_path.write_bytes(b"")
    records[2].image_path.write_bytes(b"not an image at all")
    report = verify_images(records)
    assert report.missing == [records[0].image_id]
    assert report.unreadable == sorted([records[1].image_id, records[2].image_id])
    assert report.lines() == sorted(
        [f"MISSING {records[0].image_id}", f"UNREADABLE {records[1].image_id}", f"UNREADABLE {records[2].image_id}"],
        key=lambda s: s.split()[1],
    )


def test_verify_images_order_independent_of_jobs(image_dataset):
    _, records = image_dataset
    for r in records[::3]:
        r.image_path.unlink()
    assert verify_images(records, n_jobs=1).lines() == verify_images(records[::-1], n_jobs=4).lines()
