"""
CSV reports of the statistics stage.

Floats are written with a fixed format and rows in a fixed order so reruns
produce byte-identical files.
"""
import csv
from pathlib import Path

import numpy as np

from .groupwise import MOMENTUM

REPORT_FLOAT_FORMAT = "{:.10g}"

BLOCK_TEST_FIELDS = [
    "comparison", "block_type", "control_point", "time_step", "t2", "p_raw", "p_adj", "significant",
    "mean_dx", "mean_dy", "mean_dz", "diff_dx", "diff_dy", "diff_dz", "status",
]
SIGNIFICANCE_MAP_FIELDS = [
    "comparison", "control_point", "x", "y", "z", "significant", "p_adj",
    "mean_dx", "mean_dy", "mean_dz", "diff_dx", "diff_dy", "diff_dz", "significant_force_steps",
]
TRANSPORT_FIELDS = [
    "subject_id", "lambda", "ef_original", "ef_reconstructed", "norm_in", "norm_out", "isometry_defect",
]
LAMBDA_FIELDS = ["subject_id", "lambda", "ed_volume", "log_volume_ratio", "log_lambda", "es_momentum_norm"]
REGRESSION_FIELDS = ["slope", "intercept", "r_squared", "pearson_rho", "pearson_p", "n_records"]
SUMMARY_FIELDS = ["metric", "group", "mean", "std", "n"]


def format_value(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return REPORT_FLOAT_FORMAT.format(float(value))
    return str(getattr(value, "value", value))


def write_table(path, fieldnames, rows):
    """Write dict rows with ``fieldnames`` as header; missing keys are left empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({name: format_value(row.get(name)) for name in fieldnames})
    return path


def _vector(prefix, values):
    return {f"{prefix}_d{axis}": float(value) for axis, value in zip("xyz", values)}


def block_test_rows(reports):
    for report in reports:
        yield {
            "comparison": report.comparison,
            "block_type": report.block_type,
            "control_point": report.control_point,
            "time_step": report.time_step,
            "t2": report.t2,
            "p_raw": report.p_raw,
            "p_adj": report.p_adj,
            "significant": report.significant,
            **_vector("mean", report.group_mean),
            **_vector("diff", report.mean_difference),
            "status": report.result.status,
        }


def write_block_tests(path, reports):
    return write_table(path, BLOCK_TEST_FIELDS, block_test_rows(reports))


def comparison_summaries(reports):
    """
    Per comparison: block counts and the Bonferroni family size, which is the
    number of testable blocks; untestable blocks are left out of the family.
    """
    summaries = {}
    for report in reports:
        summary = summaries.setdefault(report.comparison, {
            "blocks": 0, "bonferroni_family": 0, "untestable": 0, "significant": 0,
        })
        summary["blocks"] += 1
        if report.result.testable:
            summary["bonferroni_family"] += 1
        else:
            summary["untestable"] += 1
        summary["significant"] += int(report.significant)
    return dict(sorted(summaries.items()))


def significance_map_rows(reports, control_points):
    """
    One row per comparison and control point: the momentum block's flag and
    mean vectors, plus how many force steps were significant at that point.
    """
    force_hits = {}
    for report in reports:
        if report.block_type != MOMENTUM and report.significant:
            key = (report.comparison, report.control_point)
            force_hits[key] = force_hits.get(key, 0) + 1
    for report in reports:
        if report.block_type != MOMENTUM:
            continue
        x, y, z = control_points[report.control_point]
        yield {
            "comparison": report.comparison,
            "control_point": report.control_point,
            "x": float(x),
            "y": float(y),
            "z": float(z),
            "significant": report.significant,
            "p_adj": report.p_adj,
            **_vector("mean", report.group_mean),
            **_vector("diff", report.mean_difference),
            "significant_force_steps": force_hits.get((report.comparison, report.control_point), 0),
        }


def write_significance_map(path, reports, control_points):
    return write_table(path, SIGNIFICANCE_MAP_FIELDS, significance_map_rows(reports, np.asarray(control_points)))


def write_transport_results(path, results):
    """One row per subject, sorted by id; ``results`` maps subject ids to scaled transport results."""
    rows = [
        {
            "subject_id": subject_id,
            "lambda": float(result.lambda_),
            "ef_original": float(result.ef_original),
            "ef_reconstructed": float(result.ef_reconstructed),
            "norm_in": float(result.norm_in),
            "norm_out": float(result.norm_out),
            "isometry_defect": float(result.isometry_defect),
        }
        for subject_id, result in sorted(results.items())
    ]
    return write_table(path, TRANSPORT_FIELDS, rows)


def write_lambda_records(path, records, reference_volume):
    rows = [
        {
            "subject_id": record.subject_id,
            "lambda": float(record.lambda_),
            "ed_volume": float(record.ed_volume),
            "log_volume_ratio": float(np.log(reference_volume / record.ed_volume)),
            "log_lambda": float(np.log(record.lambda_)),
            "es_momentum_norm": None if record.es_momentum_norm is None else float(record.es_momentum_norm),
        }
        for record in sorted(records, key=lambda record: record.subject_id)
    ]
    return write_table(path, LAMBDA_FIELDS, rows)


def write_regression(path, regression):
    row = {name: getattr(regression, name) for name in REGRESSION_FIELDS}
    return write_table(path, REGRESSION_FIELDS, [row])


def write_summaries(path, summaries):
    """``summaries`` maps (metric, group) to a Summary."""
    rows = [
        {"metric": metric, "group": group, "mean": summary.mean, "std": summary.std, "n": summary.n}
        for (metric, group), summary in sorted(summaries.items())
    ]
    return write_table(path, SUMMARY_FIELDS, rows)
