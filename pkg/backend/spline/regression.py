"""
Second-order spline regression of a shape trajectory.

The trajectory starts at the first observation (the atlas) and follows the
forced Hamiltonian system; the descriptor is the initial momenta together with
the piecewise-constant forces on the shared grid. The cost is

    C = 1 / (alpha^2 d) sum_i |x_i - phi_{t_i}(x_0)|^2 + (1/n) sum_t |u_t|^2 + |v_0|_K^2
"""
from dataclasses import dataclass, field
import logging
import math

import numpy as np
import torch

from geometry.exceptions import InvalidArgumentError
from geometry.kernels import kernel_energy
from geometry.optim import OptimConfig, StopReason, gradient_descent
from geometry.shooting import flow
from geometry.types import ForceField, IntegratorConfig, LandmarkSet, as_points, as_tensor, to_numpy
from registration.lddmm import RegistrationProblem, register

logger = logging.getLogger(__name__)


def frame_steps(n_frames, n_steps):
    """Grid node of each frame: frame i of d sits at t = i / (d - 1), rounded to the nearest node."""
    if n_frames < 2:
        raise InvalidArgumentError("need at least two frames", context={"frames": n_frames})
    return [int(round(i * n_steps / (n_frames - 1))) for i in range(n_frames)]


def choose_n_steps(n_frames, minimum=10):
    """Smallest multiple of (d - 1) that is at least ``minimum``, so frames land exactly on nodes."""
    if n_frames < 2:
        raise InvalidArgumentError("need at least two frames", context={"frames": n_frames})
    per = n_frames - 1
    return per * max(1, math.ceil(minimum / per))


@dataclass(frozen=True, eq=False)
class ObservationSequence:
    steps: list
    shapes: list
    n_steps: int

    def __post_init__(self):
        steps = [int(step) for step in self.steps]
        shapes = [shape if isinstance(shape, LandmarkSet) else LandmarkSet(shape) for shape in self.shapes]
        if len(steps) != len(shapes) or len(steps) < 2:
            raise InvalidArgumentError(
                "need at least two observations with one grid step each",
                context={"steps": len(steps), "shapes": len(shapes)},
            )
        if steps[0] != 0 or steps[-1] != self.n_steps:
            raise InvalidArgumentError(
                "observations must start at t = 0 and end at t = 1", context={"steps": steps, "n_steps": self.n_steps}
            )
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise InvalidArgumentError("observation times must increase strictly", context={"steps": steps})
        if len({len(shape) for shape in shapes}) != 1:
            raise InvalidArgumentError("observed shapes differ in point count")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "shapes", shapes)

    @classmethod
    def from_frames(cls, shapes, n_steps=None):
        shapes = list(shapes)
        n_steps = choose_n_steps(len(shapes)) if n_steps is None else n_steps
        return cls(frame_steps(len(shapes), n_steps), shapes, n_steps)

    def __len__(self):
        return len(self.shapes)

    @property
    def start(self):
        return self.shapes[0]

    @property
    def times(self):
        return np.array(self.steps, dtype=np.float64) / self.n_steps

    def integrator(self, scheme="rk4"):
        return IntegratorConfig(self.n_steps, scheme)


@dataclass
class SplineFit:
    initial_momenta: np.ndarray
    forces: ForceField
    data_residuals: np.ndarray
    force_energy: float
    reg_energy: float
    alpha: float
    cost: float
    control_points: np.ndarray
    status: StopReason = StopReason.MAX_ITERS
    iterations: int = 0
    trace: list = field(default_factory=list)

    @property
    def n_steps(self):
        return self.forces.n_steps

    def descriptor(self):
        """mu_0 followed by every force step, flattened."""
        return np.concatenate([self.initial_momenta.ravel(), self.forces.forces.ravel()])


def _check_integrator(obs, integrator):
    integrator = integrator or obs.integrator()
    if integrator.n_steps != obs.n_steps:
        raise InvalidArgumentError(
            "integrator grid differs from the observation grid",
            context={"integrator": integrator.n_steps, "observations": obs.n_steps},
        )
    return integrator


def spline_terms(obs, momenta, forces, control_points, kernel, alpha, integrator):
    """
    Tensor terms (residuals per observation, force energy, initial kinetic
    energy); ``forces`` may be None for the zero force field.
    """
    momenta = as_tensor(momenta)
    control_points = as_tensor(control_points)
    result = flow(control_points, momenta, as_tensor(obs.start.points), kernel, integrator, forces)
    residuals = torch.stack([
        ((as_tensor(shape.points) - result.landmarks[step]) ** 2).sum()
        for step, shape in zip(obs.steps, obs.shapes)
    ])
    if forces is None:
        force_energy = torch.zeros((), dtype=momenta.dtype)
    else:
        force_energy = (as_tensor(forces) ** 2).sum() / integrator.n_steps
    return residuals, force_energy, kernel_energy(control_points, momenta, kernel)


def _combine(residuals, force_energy, reg_energy, alpha, n_observations):
    return residuals.sum() / (alpha ** 2 * n_observations) + force_energy + reg_energy


def spline_cost(obs: ObservationSequence, momenta, forces, control_points, kernel, alpha, integrator=None):
    integrator = _check_integrator(obs, integrator)
    if isinstance(forces, ForceField):
        forces = forces.forces
    with torch.no_grad():
        terms = spline_terms(obs, momenta, forces, control_points, kernel, alpha, integrator)
        return float(_combine(*terms, alpha, len(obs)))


def fit_spline(obs: ObservationSequence, control_points, kernel, alpha, integrator=None,
               optim_config: OptimConfig = None, fit_forces=True, initial_momenta=None, initial_forces=None,
               warm_start_config: OptimConfig = None, label="spline"):
    """
    Jointly fit mu_0 and the forces by gradient descent, control points fixed.

    mu_0 is warm-started from the registration of the first to the last
    observation and the forces from zero. With ``fit_forces=False`` the forces
    stay zero and the fit is a geodesic regression.
    """
    integrator = _check_integrator(obs, integrator)
    control_points = as_points(control_points, "control_points")
    if not alpha > 0:
        raise InvalidArgumentError("alpha must be positive", context={"alpha": alpha})
    if initial_momenta is None:
        problem = RegistrationProblem(obs.start, obs.shapes[-1], kernel, alpha, control_points, integrator)
        initial_momenta = register(problem, warm_start_config or optim_config, label=f"{label} warm start").momenta
    params = {"momenta": np.asarray(initial_momenta, dtype=np.float64)}
    if fit_forces:
        if initial_forces is None:
            params["forces"] = np.zeros((obs.n_steps,) + control_points.shape)
        else:
            forces = initial_forces if isinstance(initial_forces, ForceField) else ForceField(initial_forces)
            params["forces"] = forces.forces

    def objective(tensors):
        terms = spline_terms(obs, tensors["momenta"], tensors.get("forces"), control_points, kernel, alpha, integrator)
        return _combine(*terms, alpha, len(obs))

    optimum = gradient_descent(objective, params, optim_config, label=label)
    momenta = optimum.params["momenta"]
    forces = optimum.params.get("forces")
    forces = ForceField.zeros(obs.n_steps, len(control_points)) if forces is None else ForceField(forces)
    with torch.no_grad():
        residuals, force_energy, reg_energy = spline_terms(
            obs, momenta, forces.forces, control_points, kernel, alpha, integrator
        )
    fit = SplineFit(
        initial_momenta=momenta,
        forces=forces,
        data_residuals=to_numpy(residuals),
        force_energy=float(force_energy),
        reg_energy=max(float(reg_energy), 0.0),
        alpha=alpha,
        cost=optimum.cost,
        control_points=control_points,
        status=optimum.status,
        iterations=optimum.iterations,
        trace=optimum.trace,
    )
    logger.info("%s: cost %.6g after %d iterations (%s)", label, fit.cost, fit.iterations, fit.status.value)
    return fit

