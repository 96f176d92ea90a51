"""CSV interchange: fixed 17-significant-digit formatting so values round-trip exactly."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Dict, Mapping, Sequence

import numpy as np

from .errors import InvalidInputError


def format_value(x) -> str:
    if isinstance(x, str):
        return x
    if x is None:
        return "nan"
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def write_csv(path, columns: Mapping[str, Sequence]) -> Path:
    path = Path(path)
    names = list(columns)
    data = [list(columns[n]) for n in names]
    lengths = {len(d) for d in data}
    if len(lengths) > 1:
        raise InvalidInputError("CSV columns differ in length")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*data):
            w.writerow([format_value(x) for x in row])
    return path


def _parse(values):
    try:
        return np.array([float(v) for v in values])
    except ValueError:
        return list(values)


def read_csv_columns(path) -> Dict[str, object]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from exc
    if not rows or not rows[0]:
        raise InvalidInputError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    if any(len(r) != len(header) for r in body):
        raise InvalidInputError(f"{path}: ragged rows")
    cols = list(zip(*body)) if body else [() for _ in header]
    return {name: _parse(col) for name, col in zip(header, cols)}
