"""
Exact gradients of flow-composed objectives and a backtracking gradient descent.

Gradients are obtained by reverse-mode automatic differentiation through the
discretized integrator (discretize-then-differentiate), so they agree with finite
differences of the same numerical scheme.
"""
from dataclasses import dataclass, field
from enum import Enum
import logging

import numpy as np
import torch

from .exceptions import InvalidArgumentError, NumericalFailureError
from .shooting import flow
from .types import as_tensor, to_numpy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    max_iters: int = 200
    initial_step: float = 1.0
    backtracking: float = 0.5
    rel_tol: float = 1e-10
    grad_tol: float = 1e-10
    max_backtracks: int = 40
    armijo: float = 1e-4

    def __post_init__(self):
        if self.max_iters < 0:
            raise InvalidArgumentError("max_iters must be non-negative", context={"max_iters": self.max_iters})
        if self.initial_step <= 0:
            raise InvalidArgumentError("initial_step must be positive", context={"initial_step": self.initial_step})
        if not 0 < self.backtracking < 1:
            raise InvalidArgumentError("backtracking factor must lie in (0, 1)",
                                       context={"backtracking": self.backtracking})
        if self.rel_tol < 0 or self.grad_tol < 0:
            raise InvalidArgumentError("tolerances must be non-negative")
        if self.max_backtracks < 1:
            raise InvalidArgumentError("max_backtracks must be at least 1")


class StopReason(str, Enum):
    GRADIENT = "gradient"
    TOLERANCE = "tolerance"
    MAX_ITERS = "max_iters"
    STAGNATION = "stagnation"


@dataclass
class GradResult:
    cost: float
    grad_momenta: np.ndarray
    grad_forces: np.ndarray = None
    grad_control_points: np.ndarray = None


@dataclass
class OptimResult:
    params: dict
    cost: float
    iterations: int
    trace: list = field(default_factory=list)
    status: StopReason = StopReason.MAX_ITERS

    @property
    def converged(self):
        return self.status in (StopReason.GRADIENT, StopReason.TOLERANCE)


def evaluate(objective, params, with_grad=True):
    """
    Evaluate ``objective`` on a dict of numpy arrays.

    Returns (cost, gradients) where gradients maps each name to a numpy array, or
    (cost, None) when ``with_grad`` is False.
    """
    tensors = {name: as_tensor(value).clone().requires_grad_(with_grad) for name, value in params.items()}
    if with_grad:
        cost = objective(tensors)
        grads = torch.autograd.grad(cost, list(tensors.values()), allow_unused=True)
        gradients = {
            name: np.zeros_like(np.asarray(params[name], dtype=np.float64)) if grad is None else to_numpy(grad)
            for name, grad in zip(tensors, grads)
        }
        return float(cost.detach()), gradients
    with torch.no_grad():
        return float(objective(tensors)), None


def grad_flow_objective(objective, momenta, control_points, carried, kernel, integrator,
                        forces=None, optimize_control_points=False):
    """
    Cost and exact gradient of ``objective(FlowResult)`` with respect to the
    initial momenta, and optionally the force field and the control points.
    """
    params = {"momenta": momenta}
    if forces is not None:
        params["forces"] = forces
    if optimize_control_points:
        params["control_points"] = control_points

    def composed(tensors):
        result = flow(
            tensors.get("control_points", as_tensor(control_points)),
            tensors["momenta"],
            as_tensor(carried),
            kernel,
            integrator,
            tensors.get("forces"),
        )
        return objective(result)

    cost, grads = evaluate(composed, params)
    _check_finite(cost, grads, iteration=None)
    return GradResult(
        cost=cost,
        grad_momenta=grads["momenta"],
        grad_forces=grads.get("forces"),
        grad_control_points=grads.get("control_points"),
    )


def _is_finite(cost, grads):
    return bool(np.isfinite(cost)) and all(np.all(np.isfinite(grad)) for grad in grads.values())


def _check_finite(cost, grads, iteration):
    if not np.isfinite(cost):
        raise NumericalFailureError("objective is not finite", context={"iteration": iteration, "cost": cost})
    for name, grad in (grads or {}).items():
        if not np.all(np.isfinite(grad)):
            raise NumericalFailureError("gradient is not finite", context={"iteration": iteration, "param": name})


def _squared_norm(grads, scales):
    return sum(scales.get(name, 1.0) * float((grad ** 2).sum()) for name, grad in grads.items())


def gradient_descent(objective, initial, config: OptimConfig = None, step_scales=None, label="objective"):
    """
    Minimise ``objective`` (a function of a dict of tensors returning a scalar
    tensor) by gradient descent with an Armijo backtracking line search.

    ``step_scales`` optionally multiplies the step for individual parameters.
    The step grows by 1/backtracking after every accepted move. Returns an
    OptimResult whose cost trace is non-increasing.
    """
    config = config or OptimConfig()
    scales = dict(step_scales or {})
    params = {name: np.array(value, dtype=np.float64, copy=True) for name, value in initial.items()}

    cost, grads = evaluate(objective, params)
    _check_finite(cost, grads, iteration=0)
    trace = [cost]
    step = config.initial_step
    status = StopReason.MAX_ITERS
    iterations = 0

    for iteration in range(1, config.max_iters + 1):
        grad_sq = _squared_norm(grads, scales)
        if np.sqrt(grad_sq) <= config.grad_tol:
            status = StopReason.GRADIENT
            break

        accepted = False
        for _ in range(config.max_backtracks):
            trial = {name: params[name] - step * scales.get(name, 1.0) * grads[name] for name in params}
            trial_cost, _ = evaluate(objective, trial, with_grad=False)
            if np.isfinite(trial_cost) and trial_cost <= cost - config.armijo * step * grad_sq:
                trial_cost, trial_grads = evaluate(objective, trial)
                if _is_finite(trial_cost, trial_grads):
                    accepted = True
                    break
                logger.debug("%s: non-finite gradient at step %.3g, shrinking", label, step)
            step *= config.backtracking

        if not accepted:
            logger.warning("%s: line search stagnated at iteration %d (cost %.6g)", label, iteration, cost)
            status = StopReason.STAGNATION
            break

        previous = cost
        params, cost, grads = trial, trial_cost, trial_grads
        trace.append(cost)
        iterations = iteration
        step /= config.backtracking
        logger.debug("%s: iteration %d cost %.10g step %.3g", label, iteration, cost, step)

        if previous - cost <= config.rel_tol * max(abs(previous), np.finfo(float).tiny):
            status = StopReason.TOLERANCE
            break

    return OptimResult(params=params, cost=cost, iterations=iterations, trace=trace, status=status)
