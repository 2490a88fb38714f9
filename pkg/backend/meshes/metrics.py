"""
Cardiac scalar biomarkers on triangle meshes: volume, ejection fraction and
per-cell area strain, plus the per-cell RMSE used to validate transport.
"""
from dataclasses import dataclass
import logging

import numpy as np

from geometry.exceptions import InvalidArgumentError, InvalidInputError

logger = logging.getLogger(__name__)


def open_edges(mesh):
    """Undirected edges not shared by exactly two triangles, as sorted vertex pairs."""
    if mesh.n_triangles == 0:
        return []
    edges, counts = np.unique(mesh.to_trimesh().edges_sorted, axis=0, return_counts=True)
    return [(int(a), int(b)) for a, b in edges[counts != 2]]


def check_closed(mesh):
    """Every edge shared by two triangles that traverse it in opposite directions."""
    surface = mesh.to_trimesh()
    if mesh.n_triangles and surface.is_watertight and surface.is_winding_consistent:
        return
    offending = open_edges(mesh)
    raise InvalidInputError(
        "mesh is not closed and consistently oriented",
        code="open_mesh",
        context={"edges": offending[:10], "count": len(offending)},
    )


def signed_volume(mesh, check=True):
    """(1/6) sum over triangles of det(v0, v1, v2); positive for outward orientation."""
    if check:
        check_closed(mesh)
    corners = mesh.points[mesh.triangles]
    return float(np.linalg.det(corners).sum() / 6.0)


def triangle_areas(mesh):
    return np.asarray(mesh.to_trimesh().area_faces, dtype=np.float64)


def ejection_fraction_from_volumes(ed_volume, es_volume):
    if not ed_volume > 0:
        raise InvalidInputError("ED volume must be positive", code="non_positive_volume",
                                context={"ed_volume": ed_volume})
    return (ed_volume - es_volume) / ed_volume


def ejection_fraction(sequence):
    """(V_ED - V_ES) / V_ED; positive for a contraction."""
    return ejection_fraction_from_volumes(signed_volume(sequence.ed), signed_volume(sequence.es))


@dataclass
class AreaStrain:
    """Per-cell strain; degenerate ED cells hold NaN and are counted in ``excluded``."""

    values: np.ndarray
    excluded: int

    def valid(self, mask=None):
        keep = np.isfinite(self.values)
        if mask is not None:
            keep &= np.asarray(mask, dtype=bool)
        return self.values[keep]

    def mean(self, mask=None):
        valid = self.valid(mask)
        return float(valid.mean()) if valid.size else float("nan")

    def std(self, mask=None):
        valid = self.valid(mask)
        return float(valid.std(ddof=1)) if valid.size > 1 else 0.0


def area_strain_between(reference, deformed, degenerate_tol=1e-12):
    """(A_deformed - A_reference) / A_reference per triangle of a shared topology."""
    if reference.n_vertices != deformed.n_vertices or not np.array_equal(reference.triangles, deformed.triangles):
        raise InvalidArgumentError("meshes do not share one topology")
    reference_areas = triangle_areas(reference)
    deformed_areas = triangle_areas(deformed)
    scale = max(float(reference_areas.max(initial=0.0)), 1.0)
    degenerate = reference_areas <= degenerate_tol * scale
    values = np.full(reference_areas.shape, np.nan)
    values[~degenerate] = (deformed_areas[~degenerate] - reference_areas[~degenerate]) / reference_areas[~degenerate]
    excluded = int(degenerate.sum())
    if excluded:
        logger.warning("area strain: %d degenerate reference cells excluded", excluded)
    return AreaStrain(values=values, excluded=excluded)


def area_strain(sequence, frame):
    """Area strain of ``frame`` relative to the ED frame of ``sequence``."""
    return area_strain_between(sequence.ed, sequence.frames[frame])


def rmse_per_cell(reference, reconstructed):
    """
    Cellwise RMSE over subjects for arrays of shape (subjects, cells), and its
    unweighted mean over cells. NaN cells are left out of their subject's term.
    """
    reference = np.asarray(reference, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if reference.shape != reconstructed.shape:
        raise InvalidArgumentError(
            "reference and reconstructed values differ in shape",
            context={"reference": reference.shape, "reconstructed": reconstructed.shape},
        )
    if reference.ndim == 1:
        reference = reference[:, None]
        reconstructed = reconstructed[:, None]
    squared = (reference - reconstructed) ** 2
    with np.errstate(invalid="ignore"):
        per_cell = np.sqrt(np.nanmean(squared, axis=0))
    return per_cell, float(np.nanmean(per_cell))
