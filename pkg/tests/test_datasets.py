"""
Tests for dataset files and the synthetic benchmark generator.
"""
import os
import sys
import tempfile
import unittest

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.datasets import (
    UNLABELED, Dataset, SynthSpec, dataset_from_text, dataset_to_text, generate_synth,
    load_dataset, load_truth, write_dataset, write_truth,
)
from src.error_handler import (
    FormatError, SeparationInfeasibleError, ShapeMismatchError, ValidationError,
)


class TestGenerateSynth:
    """Synthetic seen/unseen benchmark."""

    def test_no_unseen_classes(self):
        """2 seen, 0 unseen, 5 per class, dim 2: 10 labeled rows and an empty pool."""
        bench = generate_synth(SynthSpec(seen_classes=2, unseen_classes=0, samples_per_class=5,
                                         dim=2))
        assert len(bench.labeled) == 10
        assert len(bench.unlabeled) == 0
        assert bench.unlabeled.dim == 2

    def test_deterministic(self):
        """The same spec produces identical data."""
        spec = SynthSpec(seen_classes=3, unseen_classes=2, samples_per_class=4, dim=5, seed=9)
        a, b = generate_synth(spec), generate_synth(spec)
        assert a.labeled.equals(b.labeled)
        assert a.unlabeled.equals(b.unlabeled)
        np.testing.assert_array_equal(a.unlabeled_truth, b.unlabeled_truth)

    def test_split_layout(self, small_bench):
        """Labeled holds the seen classes; the pool mixes every class; test holds unseen ones."""
        assert small_bench.labeled.classes().tolist() == [0, 1, 2, 3]
        assert not small_bench.unlabeled.labeled
        assert sorted(set(small_bench.unlabeled_truth.tolist())) == [0, 1, 2, 3, 4, 5]
        assert len(small_bench.unlabeled) == 36
        assert small_bench.test.classes().tolist() == [4, 5]

    def test_center_separation(self, small_bench):
        """Centers lie on the sphere with pairwise distance at least the separation."""
        c = small_bench.centers
        np.testing.assert_allclose(np.linalg.norm(c, axis=1), 6.0)
        for i in range(len(c)):
            for j in range(i + 1, len(c)):
                assert np.linalg.norm(c[i] - c[j]) >= 6.0 - 1e-9

    def test_infeasible_separation(self):
        """Too many well-separated centers in one dimension cannot be placed."""
        with pytest.raises(SeparationInfeasibleError):
            generate_synth(SynthSpec(seen_classes=3, unseen_classes=0, samples_per_class=1,
                                     dim=1))

    def test_invalid_spec(self):
        """Nonpositive sizes are rejected."""
        with pytest.raises(ValidationError):
            SynthSpec(seen_classes=0)


class TestDataset:
    """In-memory dataset."""

    def test_classes_skip_unlabeled(self):
        """'?' rows carry no class."""
        ds = Dataset(np.zeros((3, 2)), [UNLABELED, 2, 0])
        assert ds.classes().tolist() == [0, 2]
        assert len(ds.labeled_part()) == 2
        assert ds.unlabeled_features().shape == (1, 2)

    def test_select_classes(self):
        """Selecting classes keeps only their rows, in order."""
        ds = Dataset(np.arange(8.0).reshape(4, 2), [0, 1, 2, 1])
        part = ds.select_classes([1])
        np.testing.assert_array_equal(part.features, [[2.0, 3.0], [6.0, 7.0]])

    def test_label_count(self):
        """One label per row."""
        with pytest.raises(ShapeMismatchError):
            Dataset(np.zeros((2, 2)), [0])


class TestDataFile(unittest.TestCase):
    """slade-data v1 and slade-truth v1 files."""

    def setUp(self):
        """Create temporary directory."""
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        """Clean up temporary directory."""
        import shutil
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _path(self, name):
        return os.path.join(self.temp_dir, name)

    def test_round_trip_preserves_order(self):
        """Write then read gives identical rows in file order."""
        ds = Dataset(np.array([[0.1, 1e-17], [3.0, -2.5], [1.0 / 3.0, 7.0]]), [2, UNLABELED, 0])
        write_dataset(ds, self._path('a.data'))
        self.assertTrue(load_dataset(self._path('a.data')).equals(ds))

    def test_unlabeled_file(self):
        """An unlabeled file has '?' tags and no labels."""
        ds = Dataset(np.ones((2, 3)))
        text = dataset_to_text(ds)
        self.assertIn("labeled 0", text)
        self.assertTrue(text.rstrip().endswith("? 1.0 1.0 1.0"))
        self.assertFalse(dataset_from_text(text).labeled)

    def test_class_id_in_unlabeled_file(self):
        """Class ids are not allowed when the labeled flag is 0."""
        text = "slade-data v1\ndim 1\nlabeled 0\n3 0.5\n"
        with self.assertRaises(FormatError):
            dataset_from_text(text)

    def test_wrong_row_width(self):
        """Rows must carry exactly dim values; the error names the line."""
        text = "slade-data v1\ndim 2\nlabeled 1\n0 0.5 0.5\n1 0.5\n"
        with self.assertRaises(FormatError) as ctx:
            dataset_from_text(text, "x.data")
        self.assertEqual(ctx.exception.line, 5)

    def test_bad_header(self):
        """A wrong magic line is rejected."""
        with self.assertRaises(FormatError):
            dataset_from_text("slade-params v1\ndim 1\nlabeled 1\n")

    def test_truth_round_trip(self):
        """Truth sidecars round-trip."""
        write_truth([3, 0, 3], self._path('u.truth'))
        self.assertEqual(load_truth(self._path('u.truth')).tolist(), [3, 0, 3])

    def test_not_utf8(self):
        """Bytes that do not decode as UTF-8 are a format error naming the file."""
        path = self._path('bad.data')
        with open(path, 'wb') as f:
            f.write(b"slade-data v1\ndim 1\nlabeled 1\n0 0.5\xe9\n")
        with self.assertRaises(FormatError) as ctx:
            load_dataset(path)
        self.assertEqual(ctx.exception.path, path)

    def test_truth_not_utf8(self):
        """Truth sidecars get the same decode check."""
        path = self._path('bad.truth')
        with open(path, 'wb') as f:
            f.write(b"\xff\xfeslade-truth v1\n")
        with self.assertRaises(FormatError):
            load_truth(path)


if __name__ == '__main__':
    unittest.main()
