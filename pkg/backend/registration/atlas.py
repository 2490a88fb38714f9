"""
Atlas estimation by alternating minimisation.

Starting from the pointwise mean of the aligned shapes, each outer iteration
registers the current atlas to every shape (warm-started from the previous
momenta) and then moves the atlas points by a few descent steps on the summed
data terms with the momenta held fixed. Both half-steps are descent steps, so
the total objective never increases.
"""
from dataclasses import dataclass, field
import logging

import numpy as np

from geometry.exceptions import InvalidArgumentError
from geometry.optim import OptimConfig, gradient_descent
from geometry.shooting import flow
from geometry.types import IntegratorConfig, LandmarkSet, as_tensor
from geometry.workers import map_ordered

from .lddmm import RegistrationProblem, register

logger = logging.getLogger(__name__)

ATLAS_STEPS = 5


@dataclass
class AtlasResult:
    atlas: LandmarkSet
    registrations: list
    trace: list = field(default_factory=list)

    @property
    def objective(self):
        return self.trace[-1]


def _total_objective(registrations, alpha):
    return float(sum(r.data_term + alpha ** 2 * r.reg_term for r in registrations))


def estimate_atlas(shapes, kernel, alpha, control_points, optim_config: OptimConfig = None,
                   outer_iters=5, integrator: IntegratorConfig = None, atlas_steps=ATLAS_STEPS,
                   workers=1, rel_tol=1e-8):
    shapes = list(shapes)
    if len(shapes) < 2:
        raise InvalidArgumentError("an atlas needs at least two shapes", context={"shapes": len(shapes)})
    sizes = {len(shape) for shape in shapes}
    if len(sizes) != 1:
        raise InvalidArgumentError("shapes differ in point count", context={"sizes": sorted(sizes)})
    integrator = integrator or IntegratorConfig()
    optim_config = optim_config or OptimConfig()

    atlas = np.mean([shape.points for shape in shapes], axis=0)
    momenta = [np.zeros_like(np.asarray(control_points, dtype=np.float64)) for _ in shapes]
    registrations = None
    # Zero momenta: the flow is the identity.
    trace = [float(sum(((shape.points - atlas) ** 2).sum() for shape in shapes))]

    for outer in range(1, outer_iters + 1):
        template = LandmarkSet(atlas)

        def solve(index):
            problem = RegistrationProblem(template, shapes[index], kernel, alpha, control_points, integrator)
            return register(problem, optim_config, initial_momenta=momenta[index], label=f"atlas shape {index}")

        registrations = map_ordered(solve, range(len(shapes)), workers)
        momenta = [r.momenta for r in registrations]

        targets = [as_tensor(shape.points) for shape in shapes]
        cps = as_tensor(control_points)
        fixed_momenta = [as_tensor(m) for m in momenta]

        def atlas_objective(params):
            total = 0.0
            for target, mu in zip(targets, fixed_momenta):
                result = flow(cps, mu, params["atlas"], kernel, integrator)
                total = total + ((target - result.final_landmarks()) ** 2).sum()
            return total

        update = gradient_descent(
            atlas_objective,
            {"atlas": atlas},
            OptimConfig(
                max_iters=atlas_steps,
                initial_step=optim_config.initial_step,
                backtracking=optim_config.backtracking,
                rel_tol=optim_config.rel_tol,
                grad_tol=optim_config.grad_tol,
            ),
            label="atlas update",
        )
        atlas = update.params["atlas"]
        # The regularity terms do not depend on the atlas points.
        objective = update.cost + alpha ** 2 * sum(r.reg_term for r in registrations)
        previous = trace[-1]
        trace.append(float(objective))
        logger.info("atlas iteration %d: objective %.6g", outer, objective)
        if previous - objective <= rel_tol * max(abs(previous), np.finfo(float).tiny):
            break

    # Final registrations against the returned atlas.
    template = LandmarkSet(atlas)

    def finish(index):
        problem = RegistrationProblem(template, shapes[index], kernel, alpha, control_points, integrator)
        return register(problem, optim_config, initial_momenta=momenta[index], label=f"atlas shape {index}")

    registrations = map_ordered(finish, range(len(shapes)), workers)
    final = _total_objective(registrations, alpha)
    trace.append(final)
    return AtlasResult(atlas=template, registrations=registrations, trace=trace)
