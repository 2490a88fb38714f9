"""
Pole-ladder parallel transport of momenta along a main geodesic.

The main geodesic is shot once on a grid with 2 * n_rungs nodes per unit of
ladder, so every rung start, midpoint and end is a stored state. Exponentials
and logarithms at a node use the control points the main geodesic carries there;
the transported momenta therefore live on the control points at the end of the
main geodesic.
"""
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from geometry.exceptions import InvalidArgumentError, NumericalFailureError
from geometry.kernels import rkhs_norm
from geometry.optim import OptimConfig, StopReason
from geometry.shooting import exponential, shoot
from geometry.types import ControlSystem, IntegratorConfig, LandmarkSet, to_numpy
from registration.lddmm import RegistrationProblem, register

logger = logging.getLogger(__name__)

ISOMETRY_WARNING = 0.01


@dataclass(frozen=True, eq=False)
class MainGeodesic:
    """Geodesic from the subject's ED shape (start) towards the atlas."""

    start: LandmarkSet
    momenta: np.ndarray
    control_points: np.ndarray
    kernel: object
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)

    def __post_init__(self):
        system = ControlSystem(self.control_points, self.momenta)
        object.__setattr__(self, "control_points", system.control_points)
        object.__setattr__(self, "momenta", system.momenta)

    def trajectory(self, n_steps=None):
        integrator = self.integrator if n_steps is None else IntegratorConfig(n_steps, self.integrator.scheme)
        return shoot(ControlSystem(self.control_points, self.momenta), self.start, self.kernel, integrator)

    def endpoint(self):
        return self.trajectory().landmarks_at(-1)

    def is_trivial(self):
        return not np.any(self.momenta)


@dataclass(frozen=True)
class LadderConfig:
    n_rungs: int = 5
    rung_scale: float = 1.0
    max_scale_halvings: int = 2
    alpha: float = None
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if int(self.n_rungs) != self.n_rungs or self.n_rungs < 1:
            raise InvalidArgumentError("n_rungs must be a positive integer", context={"n_rungs": self.n_rungs})
        if not 0 < self.rung_scale <= 1:
            raise InvalidArgumentError("rung_scale must lie in (0, 1]", context={"rung_scale": self.rung_scale})
        if self.max_scale_halvings < 0:
            raise InvalidArgumentError("max_scale_halvings must be non-negative")
        if self.alpha is not None and not self.alpha > 0:
            raise InvalidArgumentError("ladder alpha must be positive", context={"alpha": self.alpha})


@dataclass
class LadderResult:
    momenta: np.ndarray
    control_points: np.ndarray
    norm_in: float
    norm_out: float
    rung_scale: float
    converged: bool = True

    @property
    def isometry_defect(self):
        return isometry_defect(self.norm_in, self.norm_out)


def isometry_defect(norm_in, norm_out):
    """|norm_out - norm_in| / norm_in; zero for a zero input."""
    if norm_in == 0:
        return 0.0 if norm_out == 0 else float("inf")
    return abs(norm_out - norm_in) / norm_in


def riemannian_exp(base: LandmarkSet, momenta, control_points, kernel, integrator=None):
    return exponential(base, control_points, momenta, kernel, integrator or IntegratorConfig())


def _log(base, target, control_points, kernel, alpha, optim_config, integrator=None, initial_momenta=None,
         label="log"):
    problem = RegistrationProblem(base, target, kernel, alpha, control_points, integrator or IntegratorConfig())
    return register(problem, optim_config, initial_momenta=initial_momenta, label=label)


def riemannian_log(base: LandmarkSet, target: LandmarkSet, control_points, kernel, alpha,
                   optim_config: OptimConfig = None, integrator=None, initial_momenta=None):
    """Momenta at ``control_points`` whose geodesic takes ``base`` closest to ``target``."""
    result = _log(base, target, control_points, kernel, alpha, optim_config, integrator, initial_momenta)
    if result.status == StopReason.STAGNATION:
        logger.warning("log map stagnated; returning the best momenta found (cost %.6g)", result.total_cost)
    return result.momenta


def ladder_steps(n_steps, n_rungs):
    """Smallest multiple of 2 * n_rungs not below n_steps."""
    per = 2 * n_rungs
    return per * math.ceil(n_steps / per)


def _climb(nodes, w, scale, ladder, kernel, alpha, integrator):
    """
    Run every rung once at ``scale``. Returns the momenta at the last node,
    whether every inner log met its tolerance, and whether any inner log
    stagnated in its line search.
    """
    shapes, cps = nodes
    n_rungs = ladder.n_rungs
    per = (len(shapes) - 1) // (2 * n_rungs)
    vector = np.asarray(w, dtype=np.float64)
    converged = True
    stalled = False
    for rung in range(n_rungs):
        start, middle, end = (2 * rung) * per, (2 * rung + 1) * per, (2 * rung + 2) * per
        try:
            shot = riemannian_exp(shapes[start], scale * vector, cps[start], kernel, integrator)
            to_midpoint = _log(shapes[middle], shot, cps[middle], kernel, alpha, ladder.optim, integrator,
                               initial_momenta=scale * vector, label=f"rung {rung} midpoint log")
            reflected = riemannian_exp(shapes[middle], -to_midpoint.momenta, cps[middle], kernel, integrator)
            to_end = _log(shapes[end], reflected, cps[end], kernel, alpha, ladder.optim, integrator,
                          initial_momenta=-scale * vector, label=f"rung {rung} end log")
        except NumericalFailureError as error:
            raise NumericalFailureError(
                f"pole ladder rung failed: {error.message}", context={**error.context, "rung": rung}
            ) from error
        converged = converged and to_midpoint.converged and to_end.converged
        stalled = stalled or StopReason.STAGNATION in (to_midpoint.status, to_end.status)
        # One sign flip per rung; the reflection reverses the vector exactly once.
        vector = -to_end.momenta / scale
    return vector, converged, stalled


def pole_ladder(geo: MainGeodesic, w, ladder: LadderConfig = None, alpha=None):
    """
    Transport momenta ``w`` (at the start of ``geo``, on its control points) to
    the end of ``geo``. ``alpha`` regularises the inner logarithms and defaults to
    ``ladder.alpha``.
    """
    ladder = ladder or LadderConfig()
    alpha = ladder.alpha if alpha is None else alpha
    if alpha is None:
        raise InvalidArgumentError("pole ladder needs a regularisation alpha")
    w = np.asarray(w, dtype=np.float64)
    if w.shape != geo.control_points.shape:
        raise InvalidArgumentError(
            "transported momenta must match the control points",
            context={"momenta": w.shape, "control_points": geo.control_points.shape},
        )

    n_steps = ladder_steps(geo.integrator.n_steps, ladder.n_rungs)
    trajectory = geo.trajectory(n_steps)
    shapes = [trajectory.landmarks_at(i) for i in range(n_steps + 1)]
    cps = [to_numpy(trajectory.control_points[i]) for i in range(n_steps + 1)]
    norm_in = rkhs_norm(cps[0], w, geo.kernel)

    if not np.any(w):
        # Transport is linear.
        return LadderResult(np.zeros_like(w), cps[-1], 0.0, 0.0, ladder.rung_scale)

    # The rung scale halves only on stagnation or numerical failure of an inner log.
    scale = ladder.rung_scale
    for attempt in range(ladder.max_scale_halvings + 1):
        last = attempt == ladder.max_scale_halvings
        try:
            vector, converged, stalled = _climb((shapes, cps), w, scale, ladder, geo.kernel, alpha, geo.integrator)
        except NumericalFailureError as error:
            if last:
                raise
            logger.info("pole ladder: %s at rung scale %.4g, halving", error.message, scale)
            scale /= 2.0
            continue
        if not stalled or last:
            break
        logger.info("pole ladder: inner logs stagnated at rung scale %.4g, halving", scale)
        scale /= 2.0

    if stalled:
        logger.warning("pole ladder: inner logs still stagnating at rung scale %.4g", scale)
    norm_out = rkhs_norm(cps[-1], vector, geo.kernel)
    result = LadderResult(vector, cps[-1], norm_in, norm_out, scale, converged)
    if result.isometry_defect > ISOMETRY_WARNING:
        logger.warning("pole ladder: isometry defect %.3g%%", 100.0 * result.isometry_defect)
    return result
