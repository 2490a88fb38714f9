"""
Shared control points: initial placement on a grid over the atlas and joint
optimisation against a set of targets.
"""
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from geometry.exceptions import InvalidArgumentError
from geometry.kernels import kernel_energy
from geometry.optim import OptimConfig, StopReason, gradient_descent
from geometry.shooting import flow
from geometry.types import IntegratorConfig, LandmarkSet, as_points, as_tensor

logger = logging.getLogger(__name__)

BOX_INFLATION = 0.10


def grid_points(shape: LandmarkSet, per_axis, inflation=BOX_INFLATION):
    """Regular per_axis^3 grid over the bounding box of ``shape`` grown by ``inflation``."""
    low = shape.points.min(axis=0)
    high = shape.points.max(axis=0)
    center = (low + high) / 2.0
    extent = (high - low) * (1.0 + inflation)
    # Flat directions still get a spread so the grid has no duplicate nodes.
    extent = np.maximum(extent, inflation * max(float(extent.max()), 1.0))
    axes = [np.linspace(c - e / 2.0, c + e / 2.0, per_axis) for c, e in zip(center, extent)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def farthest_point_selection(candidates, count, seed_point):
    """Greedy farthest-point subsample starting from the candidate nearest ``seed_point``."""
    candidates = as_points(candidates, "candidates")
    if count > len(candidates):
        raise InvalidArgumentError("not enough candidates", context={"count": count, "candidates": len(candidates)})
    first = int(np.argmin(((candidates - seed_point) ** 2).sum(axis=1)))
    chosen = [first]
    distances = ((candidates - candidates[first]) ** 2).sum(axis=1)
    while len(chosen) < count:
        index = int(np.argmax(distances))
        chosen.append(index)
        distances = np.minimum(distances, ((candidates - candidates[index]) ** 2).sum(axis=1))
    return candidates[chosen]


def initial_control_points(shape: LandmarkSet, count):
    if count < 1:
        raise InvalidArgumentError("need at least one control point", context={"count": count})
    per_axis = max(2, math.ceil((4 * count) ** (1.0 / 3.0)))
    candidates = grid_points(shape, per_axis)
    return farthest_point_selection(candidates, count, shape.centroid())


@dataclass
class ControlPointResult:
    control_points: np.ndarray
    momenta: list
    initial_cost: float
    cost: float
    status: StopReason
    iterations: int
    trace: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status in (StopReason.GRADIENT, StopReason.TOLERANCE)


def control_point_objective(atlas, targets, kernel, alpha, integrator):
    """Summed registration cost of ``atlas`` to every target, as a function of shared params."""
    template = as_tensor(atlas.points)
    target_points = [as_tensor(target.points) for target in targets]

    def objective(params):
        control_points = params["control_points"]
        total = 0.0
        for index, target in enumerate(target_points):
            momenta = params["momenta"][index]
            result = flow(control_points, momenta, template, kernel, integrator)
            data = ((target - result.final_landmarks()) ** 2).sum()
            total = total + data + alpha ** 2 * kernel_energy(control_points, momenta, kernel)
        return total

    return objective


def optimize_control_points(atlas: LandmarkSet, targets, count, kernel, alpha, optim_config: OptimConfig = None,
                            integrator: IntegratorConfig = None, initial=None, initial_momenta=None,
                            control_point_step=1.0):
    """
    Jointly minimise the summed registration costs over the shared control-point
    positions and one momentum set per target.

    ``initial`` overrides the grid initialisation; ``initial_momenta`` (one array
    per target) warm-starts the momenta.
    """
    targets = list(targets)
    if not targets:
        raise InvalidArgumentError("need at least one target")
    for target in targets:
        if len(target) != len(atlas):
            raise InvalidArgumentError(
                "targets must correspond to the atlas", context={"atlas": len(atlas), "target": len(target)}
            )
    integrator = integrator or IntegratorConfig()
    control_points = initial_control_points(atlas, count) if initial is None else as_points(initial, "control_points")
    if initial_momenta is None:
        momenta = np.zeros((len(targets),) + control_points.shape)
    else:
        momenta = np.stack([np.asarray(m, dtype=np.float64) for m in initial_momenta])
        if momenta.shape != (len(targets),) + control_points.shape:
            raise InvalidArgumentError("initial momenta do not match", context={"shape": momenta.shape})

    objective = control_point_objective(atlas, targets, kernel, alpha, integrator)
    optimum = gradient_descent(
        objective,
        {"control_points": control_points, "momenta": momenta},
        optim_config,
        step_scales={"control_points": control_point_step},
        label="control points",
    )
    logger.info(
        "control points: %d targets, cost %.6g -> %.6g in %d iterations (%s)",
        len(targets), optimum.trace[0], optimum.cost, optimum.iterations, optimum.status.value,
    )
    return ControlPointResult(
        control_points=optimum.params["control_points"],
        momenta=list(optimum.params["momenta"]),
        initial_cost=optimum.trace[0],
        cost=optimum.cost,
        status=optimum.status,
        iterations=optimum.iterations,
        trace=optimum.trace,
    )
