"""
On-disk form of a spline descriptor: momenta CSV, forces CSV and a JSON metadata
record tying the fit to its kernel, grid and control-point file.
"""
import csv
import json
from pathlib import Path

import numpy as np

from geometry.exceptions import InvalidInputError
from geometry.types import ForceField
from registration.io import FLOAT_FORMAT, file_digest, read_momenta, write_momenta

FORCE_FIELDS = ["step", "k", "ux", "uy", "uz"]
MOMENTA_FILE = "momenta.csv"
FORCES_FILE = "forces.csv"
METADATA_FILE = "spline.json"


def write_forces(path, forces: ForceField):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(FORCE_FIELDS)
        for step, row in enumerate(forces.forces):
            for k, force in enumerate(row):
                writer.writerow([step, k] + [FLOAT_FORMAT.format(float(value)) for value in force])
    return path


def read_forces(path):
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != FORCE_FIELDS:
            raise InvalidInputError("unexpected forces header", context={"path": str(path)})
        records = []
        for line, row in enumerate(reader, start=2):
            try:
                records.append((int(row["step"]), int(row["k"]), [float(row[name]) for name in FORCE_FIELDS[2:]]))
            except (TypeError, ValueError):
                raise InvalidInputError("invalid forces row", context={"path": str(path), "line": line}) from None
    if not records:
        raise InvalidInputError("forces file is empty", context={"path": str(path)})
    n_steps = max(step for step, _, _ in records) + 1
    n_control_points = max(k for _, k, _ in records) + 1
    if len(records) != n_steps * n_control_points:
        raise InvalidInputError("forces file does not cover the full grid", context={"path": str(path)})
    forces = np.zeros((n_steps, n_control_points, 3))
    for step, k, values in records:
        forces[step, k] = values
    return ForceField(forces)


def write_spline_fit(fit, directory, kernel, integrator, control_points_file=None):
    """Write the three files of one fit into ``directory``; returns the metadata dict."""
    directory = Path(directory)
    write_momenta(directory / MOMENTA_FILE, fit.control_points, fit.initial_momenta)
    write_forces(directory / FORCES_FILE, fit.forces)
    metadata = {
        "alpha": fit.alpha,
        "n_steps": fit.n_steps,
        "scheme": integrator.scheme.value,
        "integrator_hash": integrator.digest(),
        "sigma": kernel.sigma,
        "control_points_sha256": None if control_points_file is None else file_digest(control_points_file),
        "cost": fit.cost,
        "force_energy": fit.force_energy,
        "reg_energy": fit.reg_energy,
        "data_residuals": [float(value) for value in fit.data_residuals],
        "status": fit.status.value,
        "iterations": fit.iterations,
    }
    with open(directory / METADATA_FILE, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(metadata, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return metadata


def read_spline_fit(directory):
    """(control_points, initial momenta, ForceField, metadata) from a fit directory."""
    directory = Path(directory)
    control_points, momenta = read_momenta(directory / MOMENTA_FILE)
    forces = read_forces(directory / FORCES_FILE)
    with open(directory / METADATA_FILE, encoding="utf-8") as handle:
        metadata = json.load(handle)
    if forces.n_steps != metadata["n_steps"] or forces.n_control_points != len(control_points):
        raise InvalidInputError("spline files disagree on the grid", context={"directory": str(directory)})
    return control_points, momenta, forces, metadata
