"""Long-format CSV input and output for longitudinal datasets.

The format is UTF-8 text with the mandatory header ``id,time,y`` and one row
per measurement. Times may be study time or age.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

from .diagnostics import _atomic_write
from .hierarchy import DatasetError, LongitudinalDataset

__all__ = ["ParseError", "ingest_csv", "export_csv", "HEADER"]

HEADER = ("id", "time", "y")


class ParseError(DatasetError):
    """Malformed input file; ``line`` is the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def _number(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{column} value {text!r} is not numeric", line) from None
    if not math.isfinite(value):
        raise ParseError(f"{column} value {text!r} is not finite", line)
    return value


def ingest_csv(path) -> LongitudinalDataset:
    """Read a long-format ``id,time,y`` file.

    Subjects keep their order of first appearance; within a subject rows are
    sorted by time. Blank lines are ignored.

    Raises
    ------
    ParseError
        Bad header, wrong field count, non-numeric values, or a repeated
        ``(id, time)`` pair; the message names the line.
    DatasetError
        The file holds no data rows.
    """
    path = Path(path)
    ids, times, ys = [], [], []
    seen: dict[tuple[str, float], int] = {}
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = None
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            cells = [cell.strip() for cell in row]
            if header is None:
                header = tuple(c.lower() for c in cells)
                if header != HEADER:
                    raise ParseError(f"expected header 'id,time,y', got {','.join(cells)!r}", line)
                continue
            if len(cells) != 3:
                raise ParseError(f"expected 3 fields, got {len(cells)}", line)
            sid, t_text, y_text = cells
            if not sid:
                raise ParseError("empty subject id", line)
            t = _number(t_text, "time", line)
            y = _number(y_text, "y", line)
            key = (sid, t)
            if key in seen:
                raise ParseError(
                    f"duplicate observation for id {sid!r} at time {t_text} "
                    f"(first seen on line {seen[key]})", line)
            seen[key] = line
            ids.append(sid)
            times.append(t)
            ys.append(y)
    if header is None:
        raise ParseError("file is empty; expected header 'id,time,y'", 1)
    if not ids:
        raise DatasetError(f"{path}: no data rows")
    return LongitudinalDataset.from_arrays(ids, times, ys)


def export_csv(data: LongitudinalDataset, path) -> None:
    """Write ``data`` in the format read by :func:`ingest_csv`.

    Floats use their shortest round-tripping representation, so ingesting
    the file reproduces the dataset exactly.
    """
    ids, times, ys = data.long_format()
    lines = [",".join(HEADER)]
    for sid, t, y in zip(ids, times, ys):
        if "," in sid or '"' in sid:
            sid = '"' + sid.replace('"', '""') + '"'
        lines.append(f"{sid},{float(t)!r},{float(y)!r}")
    _atomic_write(path, "\n".join(lines) + "\n")
