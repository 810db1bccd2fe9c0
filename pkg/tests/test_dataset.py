import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echoseg.dataset import (
    TAXONOMY,
    Sample,
    ValidationError,
    load_manifest,
    load_sample,
    preprocess,
    presence,
    split_patients,
    write_image,
    write_label_map,
)


def test_taxonomy_ids_and_views():
    assert TAXONOMY.ids == list(range(1, 15))
    assert TAXONOMY.labels_for_view("3VTV") == [6, 7, 8, 9, 10]
    assert TAXONOMY.labels_for_view("4CHV") == [1, 2, 3, 4, 5, 10, 11, 12, 13, 14]
    assert TAXONOMY.name(0) == "background"
    assert TAXONOMY.name(10) == "spine"
    assert len(TAXONOMY.active_labels("combined")) == 14
    assert len(TAXONOMY.active_labels("3vtv")) == 5
    assert len(TAXONOMY.active_labels("4CHV_only")) == 10


def _write_pair(tmp_path, stem, shape=(20, 30), label=0):
    img = tmp_path / f"{stem}_img.png"
    lab = tmp_path / f"{stem}_lab.png"
    write_image(np.linspace(0, 1, np.prod(shape)).reshape(shape), img)
    lm = np.zeros(shape, dtype=np.uint8)
    lm[2:5, 3:7] = label
    write_label_map(lm, lab)
    return img.name, lab.name


def _manifest(tmp_path, rows):
    path = tmp_path / "manifest.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path


def test_load_manifest_roundtrip(tmp_path):
    a = _write_pair(tmp_path, "a", label=7)
    b = _write_pair(tmp_path, "b", label=1)
    path = _manifest(
        tmp_path,
        [
            {"case_id": "c1", "view": "3VTV", "normality": "normal", "image_path": a[0], "label_path": a[1]},
            {"case_id": "c1", "view": "4CHV", "normality": "normal", "image_path": b[0], "label_path": b[1]},
        ],
    )
    records = load_manifest(path)
    assert [(r.case_id, r.view) for r in records] == [("c1", "3VTV"), ("c1", "4CHV")]
    sample = load_sample(records[0], target_size=32)
    assert sample.image.shape == sample.label_map.shape == (32, 32)
    assert set(np.unique(sample.label_map)) <= {0, 7}


def test_load_manifest_rejects_duplicates(tmp_path):
    a = _write_pair(tmp_path, "a")
    row = {"case_id": "c1", "view": "3VTV", "normality": "normal", "image_path": a[0], "label_path": a[1]}
    with pytest.raises(ValidationError, match="duplicate"):
        load_manifest(_manifest(tmp_path, [row, row]))


def test_load_manifest_missing_file_names_record(tmp_path):
    a = _write_pair(tmp_path, "a")
    rows = [
        {"case_id": "c1", "view": "3VTV", "normality": "normal", "image_path": a[0], "label_path": a[1]},
        {"case_id": "c2", "view": "3VTV", "normality": "normal", "image_path": "nope.png", "label_path": a[1]},
    ]
    with pytest.raises(FileNotFoundError, match="record 1"):
        load_manifest(_manifest(tmp_path, rows))


def test_load_manifest_unknown_view(tmp_path):
    a = _write_pair(tmp_path, "a")
    row = {"case_id": "c1", "view": "5CHV", "normality": "normal", "image_path": a[0], "label_path": a[1]}
    with pytest.raises(ValidationError, match="unknown view"):
        load_manifest(_manifest(tmp_path, [row]))


def test_preprocess_pads_then_resizes():
    image = np.ones((300, 400))
    labels = np.zeros((300, 400), dtype=np.uint8)
    out_img, out_lab = preprocess(image, labels, 1024)
    assert out_img.shape == out_lab.shape == (1024, 1024)
    # padded rows (top and bottom) are zero, the centre keeps the image value
    assert out_img[0, 512] == 0.0 and out_img[-1, 512] == 0.0
    assert out_img[512, 512] == pytest.approx(1.0)


def test_preprocess_identity_on_square(rng):
    image = rng.random((128, 128))
    labels = rng.integers(0, 15, (128, 128)).astype(np.uint8)
    out_img, out_lab = preprocess(image, labels, 128)
    np.testing.assert_array_equal(out_img, image)
    np.testing.assert_array_equal(out_lab, labels)


def test_preprocess_label_values_preserved(rng):
    labels = rng.choice(np.array([0, 3, 10], dtype=np.uint8), size=(37, 53))
    _, out = preprocess(rng.random((37, 53)), labels, 96)
    seen = set()
    for row in out:
        for v in row:
            seen.add(int(v))
    assert seen <= {0, 3, 10}


def test_preprocess_rejects_empty():
    with pytest.raises(ValidationError):
        preprocess(np.zeros((0, 0)), np.zeros((0, 0)), 32)


def test_presence_cases(rng):
    assert not presence(np.zeros((8, 8), dtype=np.uint8)).any()
    m = np.zeros((8, 8), dtype=np.uint8)
    m[3, 4] = 9
    assert np.flatnonzero(presence(m)).tolist() == [8]
    m = rng.integers(0, 15, (20, 20))
    m[m == 5] = 0
    counts = Counter(int(v) for v in m.ravel())
    expected = [counts.get(l, 0) > 0 for l in range(1, 15)]
    assert presence(m).tolist() == expected
    with pytest.raises(ValidationError):
        presence(np.full((2, 2), 15))


def test_sample_rejects_foreign_labels():
    m = np.zeros((4, 4), dtype=np.uint8)
    m[0, 0] = 1  # left ventricle is not in the 3VTV
    with pytest.raises(ValidationError):
        Sample("c", "3VTV", "normal", np.zeros((4, 4)), m)


def test_split_stratified_counts():
    cases = [(f"n{i}", "normal") for i in range(10)] + [(f"a{i}", "abnormal") for i in range(10)]
    split = split_patients(cases, (0.7, 0.1, 0.2), seed=5)
    norm = {c for c, n in cases if n == "normal"}
    assert len(split.train & norm) == 7 and len(split.train - norm) == 7
    assert len(split.val & norm) == 1 and len(split.test & norm) == 2
    assert split == split_patients(cases, (0.7, 0.1, 0.2), seed=5)
    assert not split.train & split.test


def test_split_errors():
    with pytest.raises(ValidationError):
        split_patients([("a", "normal"), ("b", "normal")])
    with pytest.raises(ValidationError):
        split_patients([(str(i), "normal") for i in range(5)], (0.5, 0.5, 0.5))


@settings(max_examples=60, deadline=None)
@given(
    n_normal=st.integers(0, 30),
    n_abnormal=st.integers(0, 30),
    seed=st.integers(0, 2**31),
)
def test_split_is_partition(n_normal, n_abnormal, seed):
    cases = [(f"n{i}", "normal") for i in range(n_normal)] + [(f"a{i}", "abnormal") for i in range(n_abnormal)]
    if len(cases) < 3:
        with pytest.raises(ValidationError):
            split_patients(cases, seed=seed)
        return
    split = split_patients(cases, seed=seed)
    parts = [split.train, split.val, split.test]
    assert sum(len(p) for p in parts) == len(cases)
    assert set().union(*parts) == {c for c, _ in cases}
    # each stratum is cut within one case of its ideal share
    for label, n in (("n", n_normal), ("a", n_abnormal)):
        for part, ratio in zip(parts, (0.7, 0.1, 0.2)):
            k = sum(1 for c in part if c.startswith(label))
            assert abs(k - ratio * n) < 1.0 + 1e-9
