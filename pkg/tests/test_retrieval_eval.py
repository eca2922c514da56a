"""
Tests for exact retrieval evaluation.
"""
import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.error_handler import ShapeMismatchError, ValidationError
from src.retrieval_eval import (
    RetrievalIndex, RetrievalReport, evaluate, evaluate_leave_one_out, rank_gallery,
)


def _angles(*degrees):
    rad = np.radians(degrees)
    return np.stack([np.cos(rad), np.sin(rad)], axis=1)


class TestRankGallery:
    """Gallery ordering."""

    def test_descending_similarity(self):
        """Items are ranked by cosine similarity to the query."""
        index = RetrievalIndex(_angles(90, 10, 45), [0, 0, 1])
        assert rank_gallery(index, _angles(0)[0]).tolist() == [1, 2, 0]

    def test_ties_by_index(self):
        """Equal similarities keep ascending gallery order."""
        index = RetrievalIndex(_angles(30, 60, 30), [0, 1, 2])
        assert rank_gallery(index, _angles(0)[0]).tolist() == [0, 2, 1]

    def test_exclusion(self):
        """The excluded row never appears."""
        index = RetrievalIndex(_angles(0, 10, 20), [0, 0, 0])
        assert rank_gallery(index, _angles(0)[0], exclude=0).tolist() == [1, 2]

    def test_empty_after_exclusion(self):
        """A single-item gallery minus itself is empty."""
        index = RetrievalIndex(_angles(0), [0])
        with pytest.raises(ValidationError):
            rank_gallery(index, _angles(0)[0], exclude=0)

    def test_unit_rows_required(self):
        """Gallery rows must be unit-normalized."""
        with pytest.raises(ValidationError):
            RetrievalIndex(np.array([[2.0, 0.0]]), [0])

    def test_query_dim(self):
        """The query must have the gallery dimension."""
        with pytest.raises(ShapeMismatchError):
            rank_gallery(RetrievalIndex(_angles(0), [0]), np.ones(3) / np.sqrt(3))


class TestEvaluate:
    """Metric definitions."""

    def test_correct_wrong_correct(self):
        """R = 2 with ranking [correct, wrong, correct]: MAP@R 0.5, RP 0.5, P@1 1."""
        index = RetrievalIndex(_angles(5, 10, 15), [7, 8, 7])
        report = evaluate(index, _angles(0), [7])
        assert report.map_at_r == pytest.approx(0.5)
        assert report.r_precision == pytest.approx(0.5)
        assert report.p_at_1 == 1.0
        assert report.recall_at_k[1] == 1.0

    def test_perfect_ranking(self):
        """All relevant items first gives 1 everywhere."""
        index = RetrievalIndex(_angles(1, 2, 90), [3, 3, 4])
        report = evaluate(index, _angles(0), [3])
        assert (report.map_at_r, report.r_precision, report.p_at_1) == (1.0, 1.0, 1.0)

    def test_wrong_first(self):
        """A wrong top item zeroes P@1 and Recall@1 but not Recall@2."""
        index = RetrievalIndex(_angles(1, 2), [9, 3])
        report = evaluate(index, _angles(0), [3], ks=(1, 2))
        assert report.p_at_1 == 0.0
        assert report.recall_at_k == {1: 0.0, 2: 1.0}
        assert report.map_at_r == 0.0

    def test_query_without_relevant_items_is_skipped(self):
        """R = 0 queries do not count towards the mean."""
        index = RetrievalIndex(_angles(0, 10), [1, 2])
        report = evaluate(index, _angles(0, 5), [1, 5])
        assert report.query_count == 1
        assert report.skipped_queries == 1
        assert report.p_at_1 == 1.0

    def test_all_skipped(self):
        """Nothing to evaluate yields an all-zero report."""
        report = evaluate(RetrievalIndex(_angles(0), [1]), _angles(0), [2])
        assert report.query_count == 0 and report.map_at_r == 0.0

    def test_nonpositive_k(self):
        """Recall cutoffs must be positive."""
        with pytest.raises(ValidationError):
            evaluate(RetrievalIndex(_angles(0), [1]), _angles(0), [1], ks=(0,))

    def test_matches_brute_force(self, rng, brute_force_retrieval):
        """Leave-one-out metrics match an explicit per-query computation."""
        x = rng.normal(size=(40, 3))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        labels = rng.integers(5, size=40)
        report = evaluate_leave_one_out(x, labels, ks=(1, 2, 4, 8))
        map_r, rp, p1, recalls = brute_force_retrieval(x, labels, (1, 2, 4, 8))
        assert report.map_at_r == pytest.approx(map_r, abs=1e-12)
        assert report.r_precision == pytest.approx(rp, abs=1e-12)
        assert report.p_at_1 == pytest.approx(p1, abs=1e-12)
        for k in (1, 2, 4, 8):
            assert report.recall_at_k[k] == pytest.approx(recalls[k], abs=1e-12)
        assert report.recall_at_k[1] == report.p_at_1

    def test_metric_ordering(self, rng):
        """MAP@R never exceeds RP; Recall@K is non-decreasing in K."""
        x = rng.normal(size=(30, 4))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        report = evaluate_leave_one_out(x, rng.integers(3, size=30))
        assert report.map_at_r <= report.r_precision + 1e-12
        values = [report.recall_at_k[k] for k in sorted(report.recall_at_k)]
        assert values == sorted(values)


class TestRetrievalReport:
    """Report serialization."""

    def test_json_text(self):
        """The text form is sorted JSON with string recall keys."""
        report = RetrievalReport(0.5, 0.5, 1.0, {1: 1.0, 2: 1.0}, 1, 0)
        data = json.loads(report.to_text())
        assert data['recall_at_k'] == {'1': 1.0, '2': 1.0}
        assert RetrievalReport.from_dict(data) == report
