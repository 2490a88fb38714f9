"""
Output tree helpers: JSON records, the per-frame metrics table, provenance and
the run summary. Nothing written here carries a timestamp, so identical runs
give identical files.
"""
import json
import logging
from pathlib import Path

import django
import numpy as np
import scipy
import torch

from meshes.metrics import area_strain, ejection_fraction_from_volumes, signed_volume
from registration.io import file_digest
from stats.reports import write_table

from . import __version__

logger = logging.getLogger(__name__)

METRICS_FIELDS = ["subject_id", "frame", "volume", "ef", "as_mean", "as_std", "excluded_cells"]
PROVENANCE_FILE = "provenance.json"
SUMMARY_FILE = "run_summary.json"


def _default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, Path):
        return value.as_posix()
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(data, handle, indent=2, sort_keys=True, default=_default)
        handle.write("\n")
    return path


def read_json(path):
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def frame_metrics(sequence):
    """Volume, EF and area strain of every frame relative to the ED frame."""
    ed_volume = signed_volume(sequence.ed)
    rows = []
    for index, frame in enumerate(sequence.frames):
        volume = signed_volume(frame)
        strain = area_strain(sequence, index)
        rows.append({
            "subject_id": sequence.subject_id,
            "frame": index,
            "volume": volume,
            "ef": ejection_fraction_from_volumes(ed_volume, volume),
            "as_mean": strain.mean(),
            "as_std": strain.std(),
            "excluded_cells": strain.excluded,
        })
    return rows


def write_metrics(path, rows):
    rows = sorted(rows, key=lambda row: (row["subject_id"], row["frame"]))
    return write_table(path, METRICS_FIELDS, rows)


def provenance(config, seed):
    return {
        "config_hash": config.config_hash,
        "code_version": __version__,
        "seed": seed,
        "libraries": {
            "django": django.get_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "torch": torch.__version__,
        },
    }


def output_digests(out_dir):
    """sha256 of every CSV and mesh under ``out_dir``, keyed by relative path."""
    out_dir = Path(out_dir)
    files = sorted(
        path for path in out_dir.rglob("*")
        if path.is_file() and path.suffix in (".csv", ".vtk", ".off", ".json")
        and path.name not in (PROVENANCE_FILE, SUMMARY_FILE)
    )
    return {path.relative_to(out_dir).as_posix(): file_digest(path) for path in files}


def write_run_summary(out_dir, config, seed, stages, subjects):
    """
    Machine-readable summary: stage outcomes, per-subject status and the digest
    of every output file, tied to the config hash.
    """
    out_dir = Path(out_dir)
    write_json(out_dir / PROVENANCE_FILE, provenance(config, seed))
    summary = {
        "config_hash": config.config_hash,
        "stages": stages,
        "subjects": subjects,
        "outputs": output_digests(out_dir),
    }
    path = write_json(out_dir / SUMMARY_FILE, summary)
    logger.info("run summary written to %s", path)
    return summary
