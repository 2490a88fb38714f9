"""
Gaussian kernel machinery: Gram matrices, velocity fields and RKHS norms.

The tensor-level helpers (``gram``, ``velocity``, ``kernel_energy``) are what the
integrator differentiates through; the remaining functions are their numpy-facing
counterparts for single evaluations.
"""
import numpy as np
import torch

from .types import ControlSystem, KernelParams, as_points, as_tensor, to_numpy


def squared_distances(x, y):
    """Matrix of |x_i - y_j|^2 for tensors of shape (N, 3) and (M, 3)."""
    diffs = x[:, None, :] - y[None, :, :]
    return (diffs ** 2).sum(dim=-1)


def gram(x, y, kernel):
    """Matrix of K(x_i, y_j)."""
    return torch.exp(-squared_distances(x, y) / kernel.sigma ** 2)


def velocity(points, control_points, momenta, kernel):
    """v(x) = sum_k K(x, c_k) mu_k, evaluated at every row of ``points``."""
    return gram(points, control_points, kernel) @ momenta


def kernel_energy(control_points, momenta, kernel):
    """sum_ij K(c_i, c_j) mu_i . mu_j"""
    return (gram(control_points, control_points, kernel) * (momenta @ momenta.T)).sum()


def kernel_eval(x, y, kernel: KernelParams):
    x = as_points(x)[0]
    y = as_points(y)[0]
    return float(np.exp(-np.dot(x - y, x - y) / kernel.sigma ** 2))


def kernel_grad1(x, y, kernel: KernelParams):
    """Gradient of K with respect to its first argument: -2 (x - y) / sigma^2 K(x, y)."""
    x = as_points(x)[0]
    y = as_points(y)[0]
    return -2.0 * (x - y) / kernel.sigma ** 2 * kernel_eval(x, y, kernel)


def velocity_at(points, system: ControlSystem, kernel: KernelParams):
    """
    Velocity induced by ``system`` at one point (returns a 3-vector) or at an
    (M, 3) array of points (returns an (M, 3) array).
    """
    single = np.ndim(points) == 1
    points = as_tensor(as_points(points))
    values = to_numpy(
        velocity(points, as_tensor(system.control_points), as_tensor(system.momenta), kernel)
    )
    return values[0] if single else values


def rkhs_norm_sq(system: ControlSystem, kernel: KernelParams):
    energy = kernel_energy(as_tensor(system.control_points), as_tensor(system.momenta), kernel)
    # The Gram matrix is positive definite; clip round-off below zero.
    return max(float(energy), 0.0)


def rkhs_norm(control_points, momenta, kernel: KernelParams):
    return float(np.sqrt(rkhs_norm_sq(ControlSystem(control_points, momenta), kernel)))
