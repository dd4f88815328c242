import csv
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiger_triage import dataset as ds
from tiger_triage.errors import (
    DuplicateId, EmptyTestSet, MissingColumn, SingleClassInput, TooFewRecords,
    UnknownConfidenceValue, UnknownSpeciesValue, UnreadableImage,
)

from conftest import write_corpus


def rec(rid, species="albopictus", confidence="confirmed"):
    return ds.ImageRecord(rid, f"{rid}.jpg", species, confidence)


def synthetic(n_pos, n_neg):
    return [rec(f"p{i}") for i in range(n_pos)] + [rec(f"n{i}", "aegypti") for i in range(n_neg)]


@pytest.mark.parametrize("species,confidence,label", [
    ("albopictus", "confirmed", "tiger"),
    ("albopictus", "probable", "excluded"),
    ("albopictus", "not_classified", "excluded"),
    ("aegypti", "confirmed", "non_tiger"),
    ("other", "probable", "non_tiger"),
    ("aegypti", "not_classified", "non_tiger"),
    ("cannot_tell", "not_classified", "excluded"),
    ("cannot_tell", "confirmed", "excluded"),
])
def test_derive_label(species, confidence, label):
    assert ds.derive_label(species, confidence) is ds.BinaryLabel(label)


def test_probable_switch():
    assert ds.derive_label("albopictus", "probable", include_probable=True) is ds.BinaryLabel.TIGER


def test_ingest_examples(tmp_path):
    manifest = write_corpus(tmp_path, [("m1", "albopictus", "confirmed"),
                                       ("m2", "cannot_tell", "not_classified")])
    records = ds.ingest_manifest(manifest, tmp_path / "images")
    assert [r.binary_label for r in records] == [ds.BinaryLabel.TIGER, ds.BinaryLabel.EXCLUDED]
    assert ds.eligible(records) == records[:1]


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def test_ingest_errors(tmp_path, corpus):
    manifest, images = corpus
    bad = tmp_path / "bad.csv"
    _write(bad, ["id", "relative_path", "species"], [["a", "t000.png", "albopictus"]])
    with pytest.raises(MissingColumn):
        ds.ingest_manifest(bad, images)
    _write(bad, ds.REQUIRED_COLUMNS, [["a", "t000.png", "culex", "confirmed"]])
    with pytest.raises(UnknownSpeciesValue):
        ds.ingest_manifest(bad, images)
    _write(bad, ds.REQUIRED_COLUMNS, [["a", "t000.png", "aegypti", "maybe"]])
    with pytest.raises(UnknownConfidenceValue):
        ds.ingest_manifest(bad, images)
    _write(bad, ds.REQUIRED_COLUMNS, [["a", "t000.png", "aegypti", "confirmed"],
                                      ["a", "t001.png", "aegypti", "confirmed"]])
    with pytest.raises(DuplicateId):
        ds.ingest_manifest(bad, images)
    _write(bad, ds.REQUIRED_COLUMNS, [["a", "t000.png", "aegypti", "confirmed"],
                                      ["b", "t000.png", "aegypti", "confirmed"]])
    with pytest.raises(DuplicateId):
        ds.ingest_manifest(bad, images)


def test_unreadable_images_are_all_reported(tmp_path, corpus):
    manifest, images = corpus
    (images / "broken.png").write_bytes(b"not an image")
    bad = tmp_path / "bad.csv"
    _write(bad, ds.REQUIRED_COLUMNS, [["ok", "t000.png", "aegypti", "confirmed"],
                                      ["x1", "broken.png", "aegypti", "confirmed"],
                                      ["x2", "missing.png", "aegypti", "confirmed"]])
    with pytest.raises(UnreadableImage) as err:
        ds.ingest_manifest(bad, images)
    assert err.value.row_ids == ["x1", "x2"]
    assert err.value.to_dict()["row_ids"] == ["x1", "x2"]


def test_full_corpus_counts_arithmetic():
    records = synthetic(3364, 3014)
    summary = ds.summarize(records)
    assert (summary["tiger"], summary["non_tiger"], summary["eligible"]) == (3364, 3014, 6378)


def test_perfect_stratification():
    plan = ds.make_folds(synthetic(5, 5), k=5, seed=3)
    for f in range(5):
        ids = plan.fold_ids(f)
        assert sum(i.startswith("p") for i in ids) == 1
        assert sum(i.startswith("n") for i in ids) == 1


def test_full_corpus_folds():
    records = synthetic(3364, 3014)
    plan = ds.make_folds(records, k=5, seed=42)
    p = 3364 / 6378
    for f in range(5):
        ids = plan.fold_ids(f)
        assert len(ids) in (1275, 1276)
        pos = sum(i.startswith("p") for i in ids)
        assert abs(pos - len(ids) * p) <= 1


def test_fold_determinism_and_json_roundtrip():
    records = synthetic(30, 17)
    a = ds.make_folds(records, 5, seed=9)
    b = ds.make_folds(list(reversed(records)), 5, seed=9)
    assert a.to_json() == b.to_json()
    assert ds.FoldPlan.from_json(a.to_json()) == a
    assert set(json.loads(a.to_json())) == {"k", "seed", "assignments"}
    assert ds.make_folds(records, 5, seed=10).assignments != a.assignments


def test_fold_errors():
    with pytest.raises(TooFewRecords):
        ds.make_folds(synthetic(2, 2), k=5)
    with pytest.raises(TooFewRecords):
        ds.make_folds(synthetic(3, 3), k=1)
    with pytest.raises(SingleClassInput):
        ds.make_folds(synthetic(10, 0), k=2)


def check_plan(records, plan):
    pool = ds.eligible(records)
    ids = {r.id for r in pool}
    folds = [plan.fold_ids(f) for f in range(plan.k)]
    assert set().union(*folds) == ids
    assert sum(len(f) for f in folds) == len(ids)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    pos_ids = {r.id for r in pool if r.binary_label is ds.BinaryLabel.TIGER}
    p = len(pos_ids) / len(ids)
    for f in folds:
        assert abs(len(f & pos_ids) - len(f) * p) <= 1 + 1e-9


@settings(max_examples=60, deadline=None)
@given(k=st.sampled_from([2, 3, 5, 10]), n_pos=st.integers(1, 60), n_neg=st.integers(1, 60),
       n_excluded=st.integers(0, 5), seed=st.integers(0, 2**31))
def test_fold_invariants_property(k, n_pos, n_neg, n_excluded, seed):
    records = synthetic(n_pos, n_neg) + [rec(f"x{i}", "cannot_tell") for i in range(n_excluded)]
    if n_pos + n_neg < k:
        with pytest.raises(TooFewRecords):
            ds.make_folds(records, k, seed)
        return
    plan = ds.make_folds(records, k, seed)
    check_plan(records, plan)
    assert ds.make_folds(records, k, seed) == plan


def test_protocol_b_split():
    records = synthetic(3, 2) + [rec("u1", "albopictus", "not_classified"),
                                 rec("u2", "aegypti", "not_classified")]
    train, test = ds.split_protocol_b(records)
    assert (len(train), len(test)) == (5, 2)
    assert not {r.id for r in train} & {r.id for r in test}
    assert [r.target for r in test] == [1, 0]
    with pytest.raises(EmptyTestSet):
        ds.split_protocol_b(synthetic(3, 2))


def test_label_is_pure_function():
    a = rec("a", "other", "probable")
    b = rec("zzz", "other", "probable")
    assert a.binary_label == b.binary_label == ds.BinaryLabel.NON_TIGER
    assert math.isfinite(a.target)
