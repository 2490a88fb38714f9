"""
Transport validation: how well the transported sequences keep the originals'
ejection fraction and end-systolic area strain, with and without the EF scaling.
"""
import logging

import numpy as np

from geometry.exceptions import DependencyError, InsufficientDataError
from meshes.io import read_mesh
from meshes.metrics import (
    area_strain, area_strain_between, ejection_fraction_from_volumes, rmse_per_cell, signed_volume,
)
from stats.regression import LambdaRecord, cohort_summary, lambda_volume_regression
from stats.reports import write_lambda_records, write_regression, write_table

from .outputs import read_json
from .runner import MESH_SUFFIX, PipelineRun

logger = logging.getLogger(__name__)

VALIDATION_FIELDS = ["metric", "original_mean", "original_std", "pt_rmse", "spt_rmse", "n_subjects"]
SUBJECT_FIELDS = [
    "subject_id", "group", "lambda", "ef_original", "ef_pt", "ef_spt",
    "as_original", "as_pt", "as_spt", "as_rmse_pt", "as_rmse_spt",
]


def reconstructed_metrics(directory, name, ed_index, es_index):
    """EF and ES area strain of one reconstructed (pt or spt) sequence."""
    ed = read_mesh(directory / name / f"frame_{ed_index:02d}{MESH_SUFFIX}")
    es = read_mesh(directory / name / f"frame_{es_index:02d}{MESH_SUFFIX}")
    ef = ejection_fraction_from_volumes(signed_volume(ed), signed_volume(es, check=False))
    return ef, area_strain_between(ed, es)


def subject_validation(run, entry):
    directory = run.transport_dir(entry.subject_id)
    record = read_json(directory / "transport.json")
    subject = run.aligned_sequence(entry)
    ed_index, es_index = record["ed_index"], record["es_index"]
    original = area_strain(subject, es_index)
    ef_pt, strain_pt = reconstructed_metrics(directory, "pt", ed_index, es_index)
    ef_spt, strain_spt = reconstructed_metrics(directory, "spt", ed_index, es_index)
    return {
        "subject_id": entry.subject_id,
        "group": entry.group,
        "lambda": record["lambda"],
        "ed_volume": record["ed_volume"],
        "es_momentum_norm": record["es_momentum_norm"],
        "ef_original": record["ef_original"],
        "ef_pt": ef_pt,
        "ef_spt": ef_spt,
        "as_original": original.mean(),
        "as_pt": strain_pt.mean(),
        "as_spt": strain_spt.mean(),
        "as_rmse_pt": rmse_per_cell(original.values[None], strain_pt.values[None])[1],
        "as_rmse_spt": rmse_per_cell(original.values[None], strain_spt.values[None])[1],
        "strain": (original.values, strain_pt.values, strain_spt.values),
    }


def validation_table(rows):
    """One EF row and one AS row: cohort mean and std of the original, RMSE of PT and SPT."""
    ef_original = np.array([row["ef_original"] for row in rows])
    ef_summary = cohort_summary(ef_original)
    strain_original = np.stack([row["strain"][0] for row in rows])
    strain_pt = np.stack([row["strain"][1] for row in rows])
    strain_spt = np.stack([row["strain"][2] for row in rows])
    as_summary = cohort_summary([row["as_original"] for row in rows])
    return [
        {
            "metric": "ef",
            "original_mean": ef_summary.mean,
            "original_std": ef_summary.std,
            "pt_rmse": rmse_per_cell(ef_original, [row["ef_pt"] for row in rows])[1],
            "spt_rmse": rmse_per_cell(ef_original, [row["ef_spt"] for row in rows])[1],
            "n_subjects": len(rows),
        },
        {
            "metric": "as",
            "original_mean": as_summary.mean,
            "original_std": as_summary.std,
            "pt_rmse": rmse_per_cell(strain_original, strain_pt)[1],
            "spt_rmse": rmse_per_cell(strain_original, strain_spt)[1],
            "n_subjects": len(rows),
        },
    ]


def validate_transport(config, out_dir=None, workers=None):
    """
    Write validation/transport.csv, validation/subjects.csv and the lambda
    regression for every subject with transport outputs; returns (table rows, report).
    """
    run = PipelineRun(config, out_dir, workers)
    entries = [entry for entry in run.entries if (run.transport_dir(entry.subject_id) / "transport.json").exists()]
    if not entries:
        raise DependencyError("run the transport stage first", context={"missing": "transport.json"})
    rows = list(run.isolated("validate", lambda entry: subject_validation(run, entry), entries).values())
    if len(rows) < 2:
        raise InsufficientDataError("validation needs at least two transported subjects",
                                    context={"subjects": len(rows)})
    rows.sort(key=lambda row: row["subject_id"])
    directory = run.out / "validation"
    table = validation_table(rows)
    write_table(directory / "transport.csv", VALIDATION_FIELDS, table)
    write_table(directory / "subjects.csv", SUBJECT_FIELDS, rows)

    atlas_volume = read_json(run.require(run.atlas_record_path, "atlas"))["volume"]
    records = [LambdaRecord(row["subject_id"], row["lambda"], row["ed_volume"], row["es_momentum_norm"])
               for row in rows]
    write_lambda_records(directory / "lambda.csv", records, atlas_volume)
    try:
        write_regression(directory / "lambda_regression.csv", lambda_volume_regression(records, atlas_volume))
    except InsufficientDataError as error:
        logger.warning("lambda regression skipped: %s", error)
    for row in table:
        logger.info("%s: original %.4f ± %.4f, RMSE pt %.4g, spt %.4g", row["metric"], row["original_mean"],
                    row["original_std"], row["pt_rmse"], row["spt_rmse"])
    return table, run.report(entry.subject_id for entry in entries)
