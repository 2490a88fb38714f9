"""
Per-location group comparisons of spline descriptors.

Every control point contributes one 3-D block for its initial momentum and one
per grid step for its force. Each disease group is compared with the control
group block by block; Bonferroni runs over the testable blocks of one comparison.
"""
from dataclasses import dataclass
import hashlib
import logging

import numpy as np

from geometry.exceptions import InsufficientDataError, InvalidArgumentError
from geometry.types import ForceField, as_points
from geometry.workers import map_ordered

from .hotelling import HotellingResult, bonferroni, hotelling_two_sample

logger = logging.getLogger(__name__)

MOMENTUM = "momentum"
FORCE = "force"
SIGNIFICANCE_LEVEL = 0.05


def control_points_digest(control_points):
    points = np.ascontiguousarray(as_points(control_points, "control_points"))
    return hashlib.sha256(points.tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class SubjectDescriptor:
    """One subject's spline descriptor laid out as (1 + n_steps, N_c, 3) blocks."""

    subject_id: str
    group: str
    control_points: np.ndarray
    blocks: np.ndarray

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=np.float64)
        if blocks.ndim != 3 or blocks.shape[1:] != np.shape(self.control_points):
            raise InvalidArgumentError(
                "descriptor blocks must have shape (1 + n_steps, N_c, 3)",
                context={"subject": self.subject_id, "shape": blocks.shape},
            )
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "group", str(getattr(self.group, "value", self.group)))

    @classmethod
    def from_arrays(cls, subject_id, group, control_points, momenta, forces):
        forces = forces.forces if isinstance(forces, ForceField) else np.asarray(forces, dtype=np.float64)
        blocks = np.concatenate([np.asarray(momenta, dtype=np.float64)[None], forces], axis=0)
        return cls(subject_id, group, as_points(control_points, "control_points"), blocks)

    @classmethod
    def from_fit(cls, subject_id, group, fit):
        return cls.from_arrays(subject_id, group, fit.control_points, fit.initial_momenta, fit.forces)

    @property
    def n_steps(self):
        return len(self.blocks) - 1

    @property
    def digest(self):
        return control_points_digest(self.control_points)


@dataclass
class BlockTest:
    comparison: str
    block_type: str
    control_point: int
    time_step: object
    result: HotellingResult
    p_adj: float
    significant: bool
    group_mean: np.ndarray
    mean_difference: np.ndarray

    @property
    def t2(self):
        return self.result.t2

    @property
    def p_raw(self):
        return self.result.p


def block_index(n_control_points, n_steps):
    """(block_type, control point, time step, row in the block array), control point first then time."""
    index = []
    for k in range(n_control_points):
        index.append((MOMENTUM, k, None, 0))
        for step in range(n_steps):
            index.append((FORCE, k, step, step + 1))
    return index


def compare_groups(disease, control, comparison, alpha=SIGNIFICANCE_LEVEL, workers=1):
    """
    Block-wise Hotelling tests of ``disease`` against ``control``, both arrays of
    shape (subjects, 1 + n_steps, N_c, 3). Returns one BlockTest per block.
    """
    disease = np.asarray(disease, dtype=np.float64)
    control = np.asarray(control, dtype=np.float64)
    if disease.shape[1:] != control.shape[1:]:
        raise InvalidArgumentError(
            "descriptor layouts differ between groups",
            context={"disease": disease.shape[1:], "control": control.shape[1:]},
        )
    index = block_index(disease.shape[2], disease.shape[1] - 1)

    def run(entry):
        _, k, _, row = entry
        return hotelling_two_sample(disease[:, row, k], control[:, row, k])

    results = map_ordered(run, index, workers)
    adjusted = bonferroni([result.p for result in results], alpha)
    reports = []
    for (block_type, k, step, row), result, p_adj in zip(index, results, adjusted):
        group_mean = disease[:, row, k].mean(axis=0)
        reports.append(BlockTest(
            comparison=comparison,
            block_type=block_type,
            control_point=k,
            time_step=step,
            result=result,
            p_adj=float(p_adj),
            significant=bool(result.testable and p_adj < alpha),
            group_mean=group_mean,
            mean_difference=group_mean - control[:, row, k].mean(axis=0),
        ))
    flagged = sum(report.significant for report in reports)
    untestable = sum(not report.result.testable for report in reports)
    logger.info("%s: %d of %d blocks significant, %d untestable", comparison, flagged, len(reports), untestable)
    return reports


def groupwise_tests(descriptors, control_group="Control", alpha=SIGNIFICANCE_LEVEL, workers=1):
    """
    Compare every non-control group with ``control_group``. Comparisons come in
    sorted group order; subjects are stacked in subject-id order.
    """
    descriptors = sorted(descriptors, key=lambda descriptor: descriptor.subject_id)
    if not descriptors:
        raise InsufficientDataError("no descriptors to compare")
    digests = {descriptor.digest for descriptor in descriptors}
    if len(digests) != 1:
        raise InvalidArgumentError(
            "descriptors do not share one set of control points",
            code="control_points_mismatch",
            context={"distinct": len(digests)},
        )
    layouts = {descriptor.blocks.shape for descriptor in descriptors}
    if len(layouts) != 1:
        raise InvalidArgumentError("descriptors differ in grid or control point count",
                                   context={"layouts": sorted(layouts)})

    by_group = {}
    for descriptor in descriptors:
        by_group.setdefault(descriptor.group, []).append(descriptor.blocks)
    control_group = str(getattr(control_group, "value", control_group))
    if control_group not in by_group:
        raise InsufficientDataError("no subjects in the control group", context={"control_group": control_group})
    control = np.stack(by_group[control_group])

    reports = []
    for group in sorted(by_group):
        if group == control_group:
            continue
        reports.extend(
            compare_groups(np.stack(by_group[group]), control, f"{group}_vs_{control_group}", alpha, workers)
        )
    return reports
