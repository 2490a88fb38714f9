"""
LDDMM landmark matching: C(mu) = |S - phi_1(T)|^2 + alpha^2 |v_0|_K^2 with the
control points held fixed.
"""
from dataclasses import dataclass, field
import logging

import numpy as np

from geometry.exceptions import InvalidArgumentError
from geometry.kernels import kernel_energy
from geometry.optim import OptimConfig, StopReason, evaluate, gradient_descent
from geometry.shooting import flow
from geometry.types import IntegratorConfig, KernelParams, LandmarkSet, as_points, as_tensor

logger = logging.getLogger(__name__)


def default_alpha(shape: LandmarkSet):
    """0.1 x shape diameter, in the shape's units."""
    return 0.1 * shape.diameter()


@dataclass(frozen=True, eq=False)
class RegistrationProblem:
    template: LandmarkSet
    target: LandmarkSet
    kernel: KernelParams
    alpha: float
    control_points: np.ndarray
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)

    def __post_init__(self):
        if len(self.template) != len(self.target):
            raise InvalidArgumentError(
                "template and target need point-to-point correspondence",
                context={"template": len(self.template), "target": len(self.target)},
            )
        if not self.alpha > 0:
            raise InvalidArgumentError("alpha must be positive", context={"alpha": self.alpha})
        object.__setattr__(self, "control_points", as_points(self.control_points, "control_points"))

    @property
    def n_control_points(self):
        return len(self.control_points)

    def check_momenta(self, momenta):
        momenta = np.asarray(momenta, dtype=np.float64)
        if momenta.shape != self.control_points.shape:
            raise InvalidArgumentError(
                "momenta do not match the control points",
                context={"momenta": momenta.shape, "control_points": self.control_points.shape},
            )
        return momenta

    def terms(self, momenta, control_points=None, template=None):
        """Tensor (data term, regularity term) for tensor or array inputs."""
        control_points = as_tensor(self.control_points if control_points is None else control_points)
        template = as_tensor(self.template.points if template is None else template)
        momenta = as_tensor(momenta)
        result = flow(control_points, momenta, template, self.kernel, self.integrator)
        data = ((as_tensor(self.target.points) - result.final_landmarks()) ** 2).sum()
        regularity = kernel_energy(control_points, momenta, self.kernel)
        return data, regularity

    def objective(self, params):
        data, regularity = self.terms(params["momenta"], params.get("control_points"))
        return data + self.alpha ** 2 * regularity


@dataclass
class RegistrationResult:
    momenta: np.ndarray
    data_term: float
    reg_term: float
    total_cost: float
    converged: bool
    status: StopReason = StopReason.MAX_ITERS
    iterations: int = 0
    trace: list = field(default_factory=list)

    @property
    def geodesic_length(self):
        """Length of the geodesic, used as the distance between the two shapes."""
        return float(np.sqrt(max(self.reg_term, 0.0)))


def registration_cost(problem: RegistrationProblem, momenta):
    momenta = problem.check_momenta(momenta)
    cost, _ = evaluate(problem.objective, {"momenta": momenta}, with_grad=False)
    return cost


def registration_terms(problem: RegistrationProblem, momenta):
    """(data_term, reg_term) as floats."""
    data, regularity = problem.terms(problem.check_momenta(momenta))
    return float(data.detach()), float(regularity.detach())


def register(problem: RegistrationProblem, optim_config: OptimConfig = None, initial_momenta=None, label=None):
    """Gradient descent on the momenta; control points stay fixed."""
    if initial_momenta is None:
        initial_momenta = np.zeros_like(problem.control_points)
    initial_momenta = problem.check_momenta(initial_momenta)
    optimum = gradient_descent(
        problem.objective,
        {"momenta": initial_momenta},
        optim_config,
        label=label or "registration",
    )
    momenta = optimum.params["momenta"]
    data_term, reg_term = registration_terms(problem, momenta)
    if optimum.status == StopReason.STAGNATION:
        logger.warning("%s stagnated after %d iterations (cost %.6g)", label or "registration",
                       optimum.iterations, optimum.cost)
    logger.debug("%s: %d iterations, data %.6g, regularity %.6g, status %s", label or "registration",
                 optimum.iterations, data_term, reg_term, optimum.status.value)
    return RegistrationResult(
        momenta=momenta,
        data_term=data_term,
        reg_term=reg_term,
        total_cost=data_term + problem.alpha ** 2 * reg_term,
        converged=optimum.converged,
        status=optimum.status,
        iterations=optimum.iterations,
        trace=optimum.trace,
    )
