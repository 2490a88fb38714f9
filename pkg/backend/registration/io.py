"""
CSV storage of control points and momenta, one row per control point.
"""
import csv
import hashlib
from pathlib import Path

import numpy as np

from geometry.exceptions import InvalidInputError

MOMENTA_FIELDS = ["cx", "cy", "cz", "mx", "my", "mz"]
CONTROL_POINT_FIELDS = ["cx", "cy", "cz"]
FLOAT_FORMAT = "{:.17g}"


def _write_rows(path, fieldnames, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([FLOAT_FORMAT.format(float(value)) for value in row])
    return path


def _read_rows(path, fieldnames):
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [name.strip() for name in header] != fieldnames:
            raise InvalidInputError(
                "unexpected CSV header", context={"path": str(path), "expected": ",".join(fieldnames)}
            )
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(fieldnames):
                raise InvalidInputError("wrong number of columns", context={"path": str(path), "line": line})
            try:
                rows.append([float(value) for value in row])
            except ValueError:
                raise InvalidInputError("invalid number", context={"path": str(path), "line": line}) from None
    return np.array(rows, dtype=np.float64).reshape(-1, len(fieldnames))


def write_momenta(path, control_points, momenta):
    return _write_rows(path, MOMENTA_FIELDS, np.hstack([control_points, momenta]))


def read_momenta(path):
    """(control_points, momenta) arrays of shape (N_c, 3)."""
    table = _read_rows(path, MOMENTA_FIELDS)
    return table[:, :3].copy(), table[:, 3:].copy()


def write_control_points(path, control_points):
    return _write_rows(path, CONTROL_POINT_FIELDS, control_points)


def read_control_points(path):
    return _read_rows(path, CONTROL_POINT_FIELDS)


def file_digest(path):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
