"""Sample-batch CSV I/O: one sample per row, D columns, optional header.

Numbers are written in shortest-roundtrip decimal so output files are
byte-stable across platforms and reload to the exact same doubles.
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import OtmapError


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def read_samples(path) -> tuple[np.ndarray, list[str] | None]:
    """Read a batch CSV; returns (array, header_or_None)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row and any(c.strip() for c in row)]
    if not rows:
        raise OtmapError(f"{path}: no rows")
    header = None
    if not all(_is_float(c) for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        if not rows:
            raise OtmapError(f"{path}: header but no data rows")
    try:
        data = np.array([[float(c) for c in row] for row in rows], dtype=float)
    except ValueError as e:
        raise OtmapError(f"{path}: non-numeric cell ({e})") from e
    return data, header


def write_samples(path, data: np.ndarray, header: list[str] | None = None) -> None:
    data = np.atleast_2d(np.asarray(data, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header is not None:
            writer.writerow(header)
        for row in data:
            writer.writerow([repr(float(v)) for v in row])
