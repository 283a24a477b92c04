import numpy as np
import pytest

from chl.data import (
    DatasetManifest,
    ManifestRow,
    generate_synthetic_dataset,
    load_images,
    load_manifest,
    split_folds,
    write_synthetic_dataset,
)
from chl.errors import DataError

HEADER = "path,label,patient_id,magnification,fold\n"


def write(tmp_path, body, header=HEADER):
    path = tmp_path / "manifest.csv"
    path.write_text(header + body)
    return path


def random_manifest(rng):
    n_patients = int(rng.integers(5, 40))
    rows = []
    for p in range(n_patients):
        label = int(rng.integers(0, 2))
        for k in range(int(rng.integers(1, 8))):
            rows.append(ManifestRow(f"p{p}_{k}.png", label, f"p{p}", "NA"))
    return DatasetManifest(rows, root=None)


class TestManifest:
    def test_ten_row_fixture(self, tmp_path):
        body = "".join(f"img{k}.png,{'Benign' if k < 5 else 'MALIGNANT'},pt{k // 2},40x,{k % 5}\n" for k in range(10))
        m = load_manifest(write(tmp_path, body), check_files=False)
        assert len(m) == 10
        assert m.labels.tolist() == [0] * 5 + [1] * 5
        assert m.rows[0].magnification == "40X"
        assert m.rows[3].fold == 3
        assert len(set(m.patient_ids)) == 5

    @pytest.mark.parametrize(
        "body,message",
        [
            ("a.png,tumour,p1,NA,\n", "row 2: bad label"),
            ("a.png,benign,,NA,\n", "row 2: empty patient_id"),
            ("a.png,benign,p1,NA,\na.png,benign,p1,NA,\n", "row 3: duplicate path"),
            ("a.png,benign,p1,50X,\n", "row 2: bad magnification"),
            ("a.png,benign,p1,NA,7\n", "row 2: fold must be in 0..4"),
        ],
    )
    def test_row_errors(self, tmp_path, body, message):
        with pytest.raises(DataError, match=message):
            load_manifest(write(tmp_path, body), check_files=False)

    def test_empty(self, tmp_path):
        with pytest.raises(DataError, match="manifest has no rows"):
            load_manifest(write(tmp_path, ""), check_files=False)

    def test_bad_header(self, tmp_path):
        with pytest.raises(DataError, match="header"):
            load_manifest(write(tmp_path, "a.png,benign,p1,NA,\n", "file,label,patient\n"), check_files=False)

    def test_missing_image(self, tmp_path):
        with pytest.raises(DataError, match="does not exist"):
            load_manifest(write(tmp_path, "a.png,benign,p1,NA,\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_manifest(tmp_path / "nope.csv")


class TestSplits:
    def test_patient_disjoint_and_proportional(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m = random_manifest(rng)
            n_patients = len(set(m.patient_ids))
            for split in split_folds(m, 5, seed=int(rng.integers(1000))):
                parts = [{m.rows[i].patient_id for i in idx} for idx in (split.train, split.val, split.test)]
                assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
                assert sum(len(p) for p in parts) == n_patients
                for part, ratio in zip(parts, (0.6, 0.2, 0.2)):
                    assert abs(len(part) - ratio * n_patients) <= 1
                assert sorted(split.train + split.val + split.test) == list(range(len(m)))

    def test_ten_patients_give_two_test_patients(self):
        rows = [ManifestRow(f"{p}_{k}.png", p % 2, f"p{p}", "NA") for p in range(10) for k in range(3)]
        for split in split_folds(DatasetManifest(rows, None), 5):
            assert len({rows[i].patient_id for i in split.test}) == 2
            assert len({rows[i].patient_id for i in split.train}) == 6

    def test_seeded(self):
        m = random_manifest(np.random.default_rng(1))
        a = split_folds(m, 5, seed=3)
        b = split_folds(m, 5, seed=3)
        assert [s.test for s in a] == [s.test for s in b]

    def test_too_few_patients(self):
        rows = [ManifestRow("a.png", 0, "p0", "NA")]
        with pytest.raises(DataError, match="at least 5 patients"):
            split_folds(DatasetManifest(rows, None), 5)


class TestSynthetic:
    def test_deterministic(self):
        a, rows_a = generate_synthetic_dataset(6, 16, seed=2)
        b, rows_b = generate_synthetic_dataset(6, 16, seed=2)
        np.testing.assert_array_equal(a, b)
        assert rows_a == rows_b
        assert a.shape == (12, 16, 16, 3) and a.dtype == np.uint8

    def test_patients_group_four_tiles(self):
        _, rows = generate_synthetic_dataset(9, 16)
        assert len({r.patient_id for r in rows}) == 6

    def test_classes_differ_in_hematoxylin_coverage(self):
        images, rows = generate_synthetic_dataset(30, 32, seed=1)
        labels = np.array([r.label for r in rows])
        darkness = 255.0 - images.astype(float).mean(axis=(1, 2, 3))
        gap = darkness[labels == 1].mean() - darkness[labels == 0].mean()
        spread = darkness.std()
        assert abs(gap) > 0.5 * spread

    def test_written_dataset_loads(self, tmp_path):
        path = write_synthetic_dataset(tmp_path, 3, 16, seed=0)
        m = load_manifest(path)
        images = load_images(m, 16)
        assert images.images.shape == (6, 16, 16, 3)
        resized = load_images(m, 8)
        assert resized.images.shape == (6, 8, 8, 3)
