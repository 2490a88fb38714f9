"""
Value types for landmark shapes and their deformations.

Arrays are stored as float64 numpy arrays and converted to torch tensors only
inside the flow code, so every type here is cheap to copy between workers.
"""
from dataclasses import dataclass
from enum import Enum
import hashlib
import json

import numpy as np
import torch

from .exceptions import InvalidArgumentError

DTYPE = torch.float64


def as_points(values, name="points"):
    """
    Convert array-like input to a finite (N, 3) float64 array.

    A single 3-vector is promoted to shape (1, 3).
    """
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2 or array.shape[1] != 3:
        raise InvalidArgumentError(
            f"{name} must have shape (N, 3)", context={"shape": tuple(array.shape)}
        )
    if not np.all(np.isfinite(array)):
        raise InvalidArgumentError(f"{name} contains non-finite coordinates")
    return array


def as_tensor(values):
    """Return a float64 CPU tensor; tensors are passed through untouched."""
    if isinstance(values, torch.Tensor):
        return values if values.dtype == DTYPE else values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


def to_numpy(values):
    if isinstance(values, torch.Tensor):
        return values.detach().cpu().numpy().astype(np.float64, copy=True)
    return np.asarray(values, dtype=np.float64)


@dataclass(frozen=True)
class KernelParams:
    """Gaussian kernel K(x, y) = exp(-|x - y|^2 / sigma^2), sigma in mm."""

    sigma: float = 15.0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise InvalidArgumentError("kernel sigma must be positive", context={"sigma": self.sigma})


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Ordered point configuration; the index is the correspondence across shapes."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", as_points(self.points))
        if len(self.points) < 1:
            raise InvalidArgumentError("a landmark set needs at least one point")

    def __len__(self):
        return len(self.points)

    def centroid(self):
        return self.points.mean(axis=0)

    def diameter(self):
        """Largest pairwise distance between points."""
        diffs = self.points[:, None, :] - self.points[None, :, :]
        return float(np.sqrt((diffs ** 2).sum(axis=-1).max()))

    def scaled(self, factor, center=None):
        center = self.centroid() if center is None else np.asarray(center, dtype=np.float64)
        return LandmarkSet(center + factor * (self.points - center))

    def translated(self, offset):
        return LandmarkSet(self.points + np.asarray(offset, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class ControlSystem:
    """Control points c_k with momenta mu_k: the parameters of one deformation."""

    control_points: np.ndarray
    momenta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "control_points", as_points(self.control_points, "control_points"))
        object.__setattr__(self, "momenta", as_points(self.momenta, "momenta"))
        if self.momenta.shape != self.control_points.shape:
            raise InvalidArgumentError(
                "momenta must match control points",
                context={
                    "control_points": self.control_points.shape,
                    "momenta": self.momenta.shape,
                },
            )

    def __len__(self):
        return len(self.control_points)

    @classmethod
    def at_rest(cls, control_points):
        control_points = as_points(control_points, "control_points")
        return cls(control_points, np.zeros_like(control_points))

    def with_momenta(self, momenta):
        return ControlSystem(self.control_points, momenta)


class Scheme(str, Enum):
    EULER = "euler"
    RK4 = "rk4"


@dataclass(frozen=True)
class IntegratorConfig:
    """Uniform grid on [0, 1] with n_steps steps."""

    n_steps: int = 10
    scheme: Scheme = Scheme.RK4

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidArgumentError("n_steps must be a positive integer", context={"n_steps": self.n_steps})
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def dt(self):
        return 1.0 / self.n_steps

    def times(self):
        return np.linspace(0.0, 1.0, self.n_steps + 1)

    def digest(self):
        """Stable hash recorded next to every fitted descriptor."""
        payload = json.dumps({"n_steps": self.n_steps, "scheme": self.scheme.value}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class ForceField:
    """Piecewise-constant external forces u_k^(t), shape (n_steps, N_c, 3)."""

    forces: np.ndarray

    def __post_init__(self):
        forces = np.asarray(self.forces, dtype=np.float64)
        if forces.ndim != 3 or forces.shape[2] != 3:
            raise InvalidArgumentError("forces must have shape (n_steps, N_c, 3)", context={"shape": forces.shape})
        if not np.all(np.isfinite(forces)):
            raise InvalidArgumentError("forces contain non-finite values")
        object.__setattr__(self, "forces", forces)

    @classmethod
    def zeros(cls, n_steps, n_control_points):
        return cls(np.zeros((n_steps, n_control_points, 3)))

    @property
    def n_steps(self):
        return self.forces.shape[0]

    @property
    def n_control_points(self):
        return self.forces.shape[1]

    def energy(self):
        """(1/n) sum_t |u^(t)|^2 with the Frobenius norm over control points."""
        return float((self.forces ** 2).sum() / self.n_steps)
