"""
Scaled transport: carry a subject's systolic deformations to the atlas and find
the single factor lambda that makes the reconstructed ejection fraction match
the subject's own.
"""
from dataclasses import dataclass
from enum import Enum
import logging

import numpy as np
from scipy.optimize import minimize_scalar

from geometry.exceptions import InvalidArgumentError
from geometry.optim import OptimConfig
from geometry.types import IntegratorConfig
from geometry.workers import map_ordered
from meshes.metrics import check_closed, ejection_fraction, ejection_fraction_from_volumes, signed_volume
from registration.lddmm import RegistrationProblem, register

from .ladder import LadderConfig, MainGeodesic, isometry_defect, pole_ladder, riemannian_exp

logger = logging.getLogger(__name__)

LAMBDA_MAX = 64.0


class TransportStatus(str, Enum):
    OK = "ok"
    EF_MISMATCH = "ef_mismatch"


@dataclass
class ScaledTransportResult:
    subject_id: str
    lambda_: float
    frame_indices: list
    frame_momenta: list
    transported_momenta: list
    atlas_control_points: np.ndarray
    ef_original: float
    ef_reconstructed: float
    ef_unscaled: float
    norm_in: float
    norm_out: float
    status: TransportStatus = TransportStatus.OK
    main_geodesic_length: float = 0.0
    ladder_converged: bool = True

    @property
    def residual(self):
        return self.ef_reconstructed - self.ef_original

    @property
    def isometry_defect(self):
        return isometry_defect(self.norm_in, self.norm_out)

    @property
    def scaled_momenta(self):
        return [self.lambda_ * momenta for momenta in self.transported_momenta]

    def reconstruct(self, atlas, kernel, integrator=None, scaled=True):
        """Atlas mesh deformed by every transported (or scaled) frame, in frame order."""
        factor = self.lambda_ if scaled else 1.0
        return [
            atlas.with_vertices(
                riemannian_exp(atlas.vertices, factor * momenta, self.atlas_control_points, kernel, integrator)
            )
            for momenta in self.transported_momenta
        ]


def reconstructed_ef(atlas, atlas_volume, momenta, control_points, kernel, integrator, factor):
    deformed = riemannian_exp(atlas.vertices, factor * momenta, control_points, kernel, integrator)
    return ejection_fraction_from_volumes(atlas_volume, signed_volume(atlas.with_vertices(deformed), check=False))


def fit_lambda(ef_of_lambda, ef_target, lambda_max=LAMBDA_MAX, xatol=1e-8):
    """
    One-dimensional fit of lambda > 0 minimising (EF(lambda) - target)^2.

    The upper end of the bracket doubles from 1 until EF(upper) reaches the
    target (or ``lambda_max``); bounded Brent refinement does the rest.
    """
    upper = 1.0
    while upper < lambda_max and ef_of_lambda(upper) < ef_target:
        upper *= 2.0
    solution = minimize_scalar(
        lambda value: (ef_of_lambda(value) - ef_target) ** 2,
        bounds=(0.0, upper),
        method="bounded",
        options={"xatol": xatol},
    )
    return float(solution.x)


def scaled_transport(subject, atlas, control_points, kernel, alpha, ladder: LadderConfig = None,
                     ef_tolerance=0.005, optim_config: OptimConfig = None, integrator: IntegratorConfig = None,
                     workers=1):
    """
    Register ED to every frame, transport each frame's momenta along the ED to
    atlas geodesic, then fit one lambda on the ES frame and apply it to all.
    """
    ladder = ladder or LadderConfig()
    integrator = integrator or IntegratorConfig()
    optim_config = optim_config or OptimConfig()
    if len(atlas.vertices) != subject.ed.n_vertices:
        raise InvalidArgumentError(
            "atlas and subject meshes differ in vertex count",
            context={"atlas": atlas.n_vertices, "subject": subject.ed.n_vertices},
        )
    check_closed(atlas)
    ef_original = ejection_fraction(subject)
    ed = subject.ed.vertices
    frame_indices = list(range(len(subject)))

    def register_frame(index):
        if index == subject.ed_index:
            return np.zeros_like(np.asarray(control_points, dtype=np.float64))
        problem = RegistrationProblem(ed, subject.frames[index].vertices, kernel, alpha, control_points, integrator)
        return register(problem, optim_config, label=f"{subject.subject_id} frame {index}").momenta

    frame_momenta = map_ordered(register_frame, frame_indices, workers)
    main = register(
        RegistrationProblem(ed, atlas.vertices, kernel, alpha, control_points, integrator),
        optim_config,
        label=f"{subject.subject_id} main geodesic",
    )
    geo = MainGeodesic(ed, main.momenta, control_points, kernel, integrator)
    ladder_alpha = ladder.alpha if ladder.alpha is not None else alpha
    transported = map_ordered(lambda w: pole_ladder(geo, w, ladder, ladder_alpha), frame_momenta, workers)
    atlas_control_points = transported[0].control_points

    es = transported[frame_indices.index(subject.es_index)]
    atlas_volume = signed_volume(atlas)

    def ef_of_lambda(value):
        return reconstructed_ef(atlas, atlas_volume, es.momenta, atlas_control_points, kernel, integrator, value)

    lambda_ = fit_lambda(ef_of_lambda, ef_original)
    ef_reconstructed = ef_of_lambda(lambda_)
    status = TransportStatus.OK if abs(ef_reconstructed - ef_original) <= ef_tolerance else TransportStatus.EF_MISMATCH
    log = logger.info if status == TransportStatus.OK else logger.warning
    log("%s: lambda %.6g, EF %.4f -> %.4f (%s)", subject.subject_id, lambda_, ef_original, ef_reconstructed,
        status.value)

    return ScaledTransportResult(
        subject_id=subject.subject_id,
        lambda_=lambda_,
        frame_indices=frame_indices,
        frame_momenta=frame_momenta,
        transported_momenta=[result.momenta for result in transported],
        atlas_control_points=atlas_control_points,
        ef_original=ef_original,
        ef_reconstructed=ef_reconstructed,
        ef_unscaled=ef_of_lambda(1.0),
        norm_in=es.norm_in,
        norm_out=es.norm_out,
        status=status,
        main_geodesic_length=main.geodesic_length,
        ladder_converged=all(result.converged for result in transported),
    )
