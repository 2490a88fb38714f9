"""
Geodesic shooting and forced (spline) shooting of control points and landmarks.

Control points and momenta follow the Hamiltonian system

    dc_k/dt  = sum_j K(c_k, c_j) mu_j
    dmu_k/dt = -sum_j grad_1 K(c_k, c_j) (mu_k . mu_j) + u_k(t)

and carried landmarks are advected by the velocity field of the current state.
Everything runs on float64 tensors so the same code serves evaluation and
reverse-mode differentiation.
"""
from dataclasses import dataclass
import logging

import numpy as np
import torch

from .exceptions import InvalidArgumentError
from .kernels import gram, kernel_energy, velocity
from .types import (
    ControlSystem,
    ForceField,
    IntegratorConfig,
    KernelParams,
    LandmarkSet,
    Scheme,
    as_tensor,
    to_numpy,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FlowResult:
    """
    Discretized trajectory on the uniform grid t_0 = 0, ..., t_n = 1.

    control_points and momenta have shape (n + 1, N_c, 3), landmarks
    (n + 1, N, 3). Tensors keep their autograd history when the inputs had one.
    """

    control_points: torch.Tensor
    momenta: torch.Tensor
    landmarks: torch.Tensor
    times: np.ndarray

    @property
    def n_steps(self):
        return len(self.times) - 1

    @property
    def states(self):
        return [
            (to_numpy(self.control_points[i]), to_numpy(self.momenta[i]), to_numpy(self.landmarks[i]))
            for i in range(self.n_steps + 1)
        ]

    def final_landmarks(self):
        return self.landmarks[-1]

    def landmarks_at(self, step):
        return LandmarkSet(to_numpy(self.landmarks[step]))

    def system_at(self, step):
        return ControlSystem(to_numpy(self.control_points[step]), to_numpy(self.momenta[step]))

    def energies(self, kernel):
        """Kinetic energy |v_t|_K^2 at every time node."""
        return np.array(
            [float(kernel_energy(self.control_points[i], self.momenta[i], kernel)) for i in range(self.n_steps + 1)]
        )


def _derivatives(control_points, momenta, landmarks, force, kernel):
    kcc = gram(control_points, control_points, kernel)
    d_control_points = kcc @ momenta
    weights = kcc * (momenta @ momenta.T)
    diffs = control_points[:, None, :] - control_points[None, :, :]
    d_momenta = (2.0 / kernel.sigma ** 2) * (weights[:, :, None] * diffs).sum(dim=1) + force
    d_landmarks = velocity(landmarks, control_points, momenta, kernel)
    return d_control_points, d_momenta, d_landmarks


def hamiltonian_rhs(system: ControlSystem, kernel: KernelParams, forces_at_t=None):
    """
    Right-hand side of the Hamiltonian system at one instant.

    Returns (dc, dmu) as numpy arrays of shape (N_c, 3).
    """
    control_points = as_tensor(system.control_points)
    momenta = as_tensor(system.momenta)
    if forces_at_t is None:
        force = torch.zeros_like(momenta)
    else:
        force = as_tensor(forces_at_t)
        if tuple(force.shape) != tuple(momenta.shape):
            raise InvalidArgumentError(
                "forces must have shape (N_c, 3)",
                context={"forces": tuple(force.shape), "momenta": tuple(momenta.shape)},
            )
    d_control_points, d_momenta, _ = _derivatives(
        control_points, momenta, control_points[:0], force, kernel
    )
    return to_numpy(d_control_points), to_numpy(d_momenta)


def _euler_step(state, force, dt, kernel):
    derivs = _derivatives(*state, force, kernel)
    return tuple(value + dt * slope for value, slope in zip(state, derivs))


def _rk4_step(state, force, dt, kernel):
    k1 = _derivatives(*state, force, kernel)
    s2 = tuple(value + 0.5 * dt * slope for value, slope in zip(state, k1))
    k2 = _derivatives(*s2, force, kernel)
    s3 = tuple(value + 0.5 * dt * slope for value, slope in zip(state, k2))
    k3 = _derivatives(*s3, force, kernel)
    s4 = tuple(value + dt * slope for value, slope in zip(state, k3))
    k4 = _derivatives(*s4, force, kernel)
    return tuple(
        value + dt / 6.0 * (a + 2.0 * b + 2.0 * c + d)
        for value, a, b, c, d in zip(state, k1, k2, k3, k4)
    )


_STEPPERS = {Scheme.EULER: _euler_step, Scheme.RK4: _rk4_step}


def flow(control_points, momenta, landmarks, kernel, integrator, forces=None):
    """
    Integrate the tensor state over [0, 1].

    ``forces`` is None or a tensor of shape (n_steps, N_c, 3); u^(i) is held
    constant on [t_i, t_(i+1)). A missing force field is replaced by zeros so the
    geodesic and the zero-force spline share one code path.
    """
    control_points = as_tensor(control_points)
    momenta = as_tensor(momenta)
    landmarks = as_tensor(landmarks)
    n_steps = integrator.n_steps
    if forces is None:
        forces = torch.zeros((n_steps,) + tuple(momenta.shape), dtype=momenta.dtype)
    else:
        forces = as_tensor(forces)
        expected = (n_steps,) + tuple(momenta.shape)
        if tuple(forces.shape) != expected:
            raise InvalidArgumentError(
                "force field does not match the integrator grid and control points",
                context={"forces": tuple(forces.shape), "expected": expected},
            )
    step = _STEPPERS[integrator.scheme]
    dt = integrator.dt

    state = (control_points, momenta, landmarks)
    history = [state]
    for i in range(n_steps):
        state = step(state, forces[i], dt, kernel)
        history.append(state)

    return FlowResult(
        control_points=torch.stack([s[0] for s in history]),
        momenta=torch.stack([s[1] for s in history]),
        landmarks=torch.stack([s[2] for s in history]),
        times=integrator.times(),
    )


def shoot(system: ControlSystem, carried: LandmarkSet, kernel: KernelParams,
          integrator: IntegratorConfig = None, forces: ForceField = None):
    """Shoot ``system`` and carry ``carried`` along; returns a detached FlowResult."""
    integrator = integrator or IntegratorConfig()
    if forces is not None and forces.n_steps != integrator.n_steps:
        raise InvalidArgumentError(
            "force field has a different number of steps than the integrator",
            context={"forces": forces.n_steps, "integrator": integrator.n_steps},
        )
    with torch.no_grad():
        return flow(
            system.control_points,
            system.momenta,
            carried.points,
            kernel,
            integrator,
            None if forces is None else forces.forces,
        )


def hamiltonian_energy(system: ControlSystem, kernel: KernelParams):
    """Energy |v|_K^2 of the current state; conserved along geodesics."""
    return max(float(kernel_energy(as_tensor(system.control_points), as_tensor(system.momenta), kernel)), 0.0)


def exponential(base: LandmarkSet, control_points, momenta, kernel, integrator):
    """Endpoint phi_1(base) of the geodesic from (control_points, momenta)."""
    result = shoot(ControlSystem(control_points, momenta), base, kernel, integrator)
    return LandmarkSet(to_numpy(result.final_landmarks()))
