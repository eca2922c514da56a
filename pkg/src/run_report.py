"""
Run reports.

A report is a JSON document (sorted keys, 2-space indent) holding the command,
seed, the config text exactly as it was read, per-round history and metrics,
and the fingerprints of every checkpoint written. Wall-clock time is kept in a
``<report>.timing`` sidecar so the report itself is reproducible byte for byte.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from .error_handler import FormatError
from .retrieval_eval import RetrievalReport
from .text_format import read_text

logger = logging.getLogger(__name__)

REPORT_FORMAT = "slade-report v1"


@dataclass
class RunReport:
    command: str
    seed: int
    config_text: str
    history: Dict[str, Any] = field(default_factory=dict)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    evaluation: Optional[RetrievalReport] = None
    extras: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'format': REPORT_FORMAT,
            'command': self.command,
            'seed': self.seed,
            'config': self.config_text,
            'history': self.history,
            'checkpoints': self.checkpoints,
            'evaluation': self.evaluation.to_dict() if self.evaluation else None,
            'extras': self.extras,
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        if data.get('format') != REPORT_FORMAT:
            raise FormatError(f"not a run report (format {data.get('format')!r})")
        evaluation = data.get('evaluation')
        return cls(
            command=data['command'],
            seed=int(data['seed']),
            config_text=data['config'],
            history=data.get('history', {}),
            checkpoints=data.get('checkpoints', {}),
            evaluation=RetrievalReport.from_dict(evaluation) if evaluation else None,
            extras=data.get('extras', {}),
        )


def write_report(report: RunReport, path: str, wall_clock: Optional[float] = None) -> None:
    """Write the report, plus the timing sidecar when ``wall_clock`` is given."""
    with open(path, 'w', encoding='utf-8') as f:
        f.write(report.to_text())
    if wall_clock is not None:
        with open(path + ".timing", 'w', encoding='utf-8') as f:
            f.write(f"wall_clock_seconds {wall_clock:.3f}\n")
    logger.info("wrote run report %s", path)


def load_report(path: str) -> RunReport:
    try:
        data = json.loads(read_text(path))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", line=exc.lineno, path=path) from exc
    return RunReport.from_dict(data)


def write_retrieval_report(report: RetrievalReport, path: Optional[str] = None) -> str:
    """Serialize an evaluation report; written to ``path`` when given."""
    text = report.to_text()
    if path:
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
    return text
