"""Locale-independent CSV output with 6 significant digit floats and NAN tokens."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np


def format_float(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "NAN"
    return format(v, ".6g")


def format_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    return str(v)


def write_csv(path, header, rows) -> Path:
    lines = [",".join(header)]
    lines += [",".join(format_cell(v) for v in row) for row in rows]
    path = Path(path)
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return path
