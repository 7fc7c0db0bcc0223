"""CSV artifacts: every file has a header row and is re-read by ``read_csv``."""

from __future__ import annotations

import csv
import math
from pathlib import Path


def fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    try:
        return fmt(v.item())  # numpy scalars
    except AttributeError:
        return str(v)


def write_csv(path, header, rows):
    """Write dict rows (missing keys become empty cells) under ``header``."""
    path = Path(path)
    try:
        fh = open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    with fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(row.get(k)) for k in header])
    return path


def _parse(v):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_csv(path):
    """Rows as dicts with ints, floats, strings, and None for empty cells."""
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]
