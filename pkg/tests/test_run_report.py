"""
Tests for run report files.
"""
import json
import os
import sys

import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.error_handler import FormatError
from src.retrieval_eval import RetrievalReport
from src.run_report import RunReport, load_report, write_report, write_retrieval_report


@pytest.fixture
def report():
    return RunReport(
        command='self-train', seed=3, config_text="# raw\nseed = 3\n",
        history={'rounds': []}, checkpoints={'student.params': '0123456789abcdef'},
        evaluation=RetrievalReport(0.5, 0.75, 1.0, {1: 1.0, 4: 1.0}, 12, 0),
        extras={'clusters': 3},
    )


class TestRunReport:
    """slade-report v1 JSON."""

    def test_write_and_load(self, report, tmp_path):
        """A written report loads back equal."""
        path = str(tmp_path / 'report.json')
        write_report(report, path)
        assert load_report(path) == report

    def test_config_kept_verbatim(self, report):
        """The config text is stored exactly as read, comments included."""
        data = json.loads(report.to_text())
        assert data['config'] == "# raw\nseed = 3\n"
        assert data['format'] == "slade-report v1"

    def test_deterministic_text(self, report):
        """Serialization does not depend on time or dict order."""
        assert report.to_text() == report.to_text()
        assert 'wall_clock' not in report.to_text()

    def test_timing_sidecar(self, report, tmp_path):
        """Wall-clock time goes to a sidecar, not the report."""
        path = str(tmp_path / 'report.json')
        write_report(report, path, wall_clock=1.5)
        with open(path + '.timing') as f:
            assert f.read() == "wall_clock_seconds 1.500\n"

    def test_no_sidecar_without_timing(self, report, tmp_path):
        """No wall clock, no sidecar."""
        path = str(tmp_path / 'report.json')
        write_report(report, path)
        assert not os.path.exists(path + '.timing')

    def test_invalid_json(self, tmp_path):
        """Broken JSON is a format error with a line number."""
        path = tmp_path / 'report.json'
        path.write_text('{\n  "format": \n')
        with pytest.raises(FormatError) as ctx:
            load_report(str(path))
        assert ctx.value.line is not None

    def test_wrong_format_tag(self, tmp_path):
        """Other JSON documents are rejected."""
        path = tmp_path / 'report.json'
        path.write_text('{"format": "something else"}')
        with pytest.raises(FormatError):
            load_report(str(path))

    def test_not_utf8(self, tmp_path):
        """A report that is not UTF-8 is a format error."""
        path = tmp_path / 'report.json'
        path.write_bytes(b'{"format": "\xff"}')
        with pytest.raises(FormatError):
            load_report(str(path))

    def test_retrieval_report_file(self, tmp_path):
        """Evaluation reports are written as returned."""
        path = str(tmp_path / 'eval.json')
        text = write_retrieval_report(RetrievalReport(1.0, 1.0, 1.0, {1: 1.0}, 2, 0), path)
        with open(path) as f:
            assert f.read() == text
