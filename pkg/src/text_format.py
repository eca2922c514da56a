"""
Versioned text containers used for every on-disk artifact.

Grammar shared by ``slade-params v1``, ``slade-basis v1``, ``slade-kmeans v1``
and ``slade-data v1``::

    <magic> v<version>          header line
    <key> <value> [<value> ...] keyed lines, whitespace separated
    <row of values>             matrix rows, one per line
    end                         trailer (params/basis/kmeans only)

Floats are written with ``repr`` so that write then read is bit-exact.
Blank lines and lines starting with ``#`` are skipped by the reader.
"""
from typing import Iterable, List, Optional, Tuple

import numpy as np

from .error_handler import FormatError


def format_float(x: float) -> str:
    """Shortest round-tripping decimal form of ``x``."""
    return repr(float(x))


def format_row(values: Iterable[float]) -> str:
    return " ".join(format_float(v) for v in values)


def format_matrix(m: np.ndarray) -> List[str]:
    return [format_row(row) for row in m]


class ContainerReader:
    """Line-oriented reader that reports line numbers on every failure."""

    def __init__(self, text: str, path: Optional[str] = None):
        self.path = path
        self._lines: List[Tuple[int, str]] = []
        for number, raw in enumerate(text.splitlines(), start=1):
            stripped = raw.strip()
            if not stripped or stripped.startswith('#'):
                continue
            self._lines.append((number, stripped))
        self._pos = 0

    @property
    def line_number(self) -> Optional[int]:
        """Line number of the next unread line (None at end of input)."""
        if self._pos < len(self._lines):
            return self._lines[self._pos][0]
        return None

    def error(self, message: str, line: Optional[int] = None) -> FormatError:
        return FormatError(message, line=line if line is not None else self.line_number,
                           path=self.path)

    def at_end(self) -> bool:
        return self._pos >= len(self._lines)

    def next_line(self) -> Tuple[int, str]:
        if self.at_end():
            last = self._lines[-1][0] if self._lines else 0
            raise FormatError("unexpected end of file", line=last + 1, path=self.path)
        item = self._lines[self._pos]
        self._pos += 1
        return item

    def expect_header(self, magic: str, version: int = 1) -> None:
        number, line = self.next_line()
        if line != f"{magic} v{version}":
            raise self.error(f"bad header {line!r}, expected '{magic} v{version}'", number)

    def read_keyed(self, key: str) -> Tuple[int, List[str]]:
        """Read ``<key> <fields...>`` and return the fields."""
        number, line = self.next_line()
        fields = line.split()
        if fields[0] != key:
            raise self.error(f"expected '{key}', got {fields[0]!r}", number)
        return number, fields[1:]

    def read_ints(self, key: str, count: Optional[int] = None) -> List[int]:
        number, fields = self.read_keyed(key)
        if count is not None and len(fields) != count:
            raise self.error(f"'{key}' needs {count} values, got {len(fields)}", number)
        try:
            return [int(f) for f in fields]
        except ValueError:
            raise self.error(f"non-integer value in '{key}'", number) from None

    def read_row(self, cols: int) -> np.ndarray:
        number, line = self.next_line()
        return parse_row(line, cols, number, self.path)

    def read_matrix(self, rows: int, cols: int) -> np.ndarray:
        m = np.empty((rows, cols), dtype=np.float64)
        for r in range(rows):
            m[r] = self.read_row(cols)
        return m

    def expect_end(self) -> None:
        number, line = self.next_line()
        if line != "end":
            raise self.error(f"expected 'end', got {line!r}", number)
        if not self.at_end():
            raise self.error("trailing content after 'end'")


def parse_row(line: str, cols: int, number: int, path: Optional[str] = None) -> np.ndarray:
    """Parse a whitespace separated row of exactly ``cols`` finite floats."""
    fields = line.split()
    if len(fields) != cols:
        raise FormatError(f"expected {cols} values, got {len(fields)}", line=number, path=path)
    try:
        row = np.array([float(f) for f in fields], dtype=np.float64)
    except ValueError:
        raise FormatError("non-numeric field", line=number, path=path) from None
    if not np.all(np.isfinite(row)):
        raise FormatError("non-finite value", line=number, path=path)
    return row


def read_text(path: str) -> str:
    """Whole file as text; bytes that are not UTF-8 are a format error."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return f.read()
    except UnicodeDecodeError as exc:
        raise FormatError(f"not UTF-8 text (byte {exc.start})", path=path) from None


def write_text(path: str, lines: Iterable[str]) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        for line in lines:
            f.write(line)
            f.write("\n")
