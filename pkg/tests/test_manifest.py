import json
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from infarctseg.core import CaseRecord, LabelSchema
from infarctseg.errors import ConfigurationError, DataError, SchemaError
from infarctseg.io.manifest import DatasetManifest, SplitMix64, assign_folds, load_manifest, save_manifest


def manifest_of(ids, seed=0):
    return DatasetManifest("t", tuple(CaseRecord(i, f"{i}.nii.gz") for i in ids), LabelSchema.binary(), seed=seed)


def test_splitmix64_reference_stream():
    # first outputs for seed 0 from the published reference implementation
    g = SplitMix64(0)
    assert [g.next_u64() for _ in range(3)] == [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]


def test_below_is_in_range():
    g = SplitMix64(3)
    assert all(0 <= g.below(7) < 7 for _ in range(500))
    with pytest.raises(ValueError):
        g.below(0)


def test_ten_cases_five_folds_of_two():
    m = assign_folds(manifest_of([f"c{i}" for i in range(10)]), 5)
    assert sorted(Counter(c.fold_index for c in m.cases).values()) == [2] * 5


def test_eleven_cases():
    m = assign_folds(manifest_of([f"c{i}" for i in range(11)]), 5)
    assert sorted(Counter(c.fold_index for c in m.cases).values()) == [2, 2, 2, 2, 3]


@given(st.integers(3, 50), st.integers(0, 2**32), st.randoms(use_true_random=False))
def test_fold_laws(n, seed, random):
    ids = [f"case_{i:03d}" for i in range(n)]
    k = min(5, n)
    a = assign_folds(manifest_of(ids), k, seed)
    shuffled = ids[:]
    random.shuffle(shuffled)
    b = assign_folds(manifest_of(shuffled), k, seed)
    fa = {c.case_id: c.fold_index for c in a.cases}
    assert fa == {c.case_id: c.fold_index for c in b.cases}
    sizes = Counter(fa.values())
    assert set(fa) == set(ids)
    assert set(sizes) <= set(range(k))
    assert max(sizes.values()) - min(sizes.values()) <= 1


def test_fold_errors():
    with pytest.raises(ConfigurationError):
        assign_folds(manifest_of(["a", "b"]), 5)
    with pytest.raises(ConfigurationError):
        assign_folds(manifest_of(["a", "b"]), 1)


def test_duplicate_ids_rejected():
    with pytest.raises(SchemaError):
        manifest_of(["a", "a"])


def test_save_load_round_trip(tmp_path):
    for name in ("a", "b"):
        (tmp_path / f"{name}.nii.gz").write_bytes(b"")
    m = assign_folds(manifest_of(["a", "b"]), 2, seed=11)
    save_manifest(m, tmp_path / "manifest.json")
    back = load_manifest(tmp_path / "manifest.json")
    assert back.cases == m.cases and back.seed == 11
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert set(doc) == {"dataset_name", "seed", "label_schema", "cases"}


def test_missing_file_is_data_error(tmp_path):
    save_manifest(manifest_of(["a"]), tmp_path / "manifest.json")
    with pytest.raises(DataError, match="a"):
        load_manifest(tmp_path / "manifest.json")
    with pytest.raises(DataError):
        load_manifest(tmp_path / "nope.json")


def test_malformed_manifest(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_manifest(tmp_path / "m.json")
    (tmp_path / "m.json").write_text(json.dumps({"cases": []}))
    with pytest.raises(ConfigurationError):
        load_manifest(tmp_path / "m.json")
