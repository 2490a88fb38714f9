"""
Rigid (rotation + translation) least-squares alignment of corresponding points.
"""
from dataclasses import dataclass

import numpy as np

from geometry.exceptions import DegenerateConfigurationError, InvalidArgumentError
from geometry.types import LandmarkSet


@dataclass(frozen=True, eq=False)
class RigidAlignment:
    rotation: np.ndarray
    translation: np.ndarray
    aligned: LandmarkSet
    residual: float

    def apply(self, points):
        """Apply the same motion to another point array of any length."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def rigid_align(moving: LandmarkSet, fixed: LandmarkSet, rank_tol=1e-10):
    """
    Rotation R (det +1) and translation t minimising sum |R m_i + t - f_i|^2.

    Orthogonal Procrustes via the SVD of the centred cross-covariance; the
    reflection case is excluded by flipping the last singular direction.
    """
    if len(moving) != len(fixed):
        raise InvalidArgumentError(
            "point sets differ in size", context={"moving": len(moving), "fixed": len(fixed)}
        )
    if len(moving) < 3:
        raise InvalidArgumentError("rigid alignment needs at least three points", context={"points": len(moving)})

    moving_centroid = moving.centroid()
    fixed_centroid = fixed.centroid()
    covariance = (moving.points - moving_centroid).T @ (fixed.points - fixed_centroid)
    u, singular, vt = np.linalg.svd(covariance)
    if singular[0] <= 0 or singular[1] <= rank_tol * singular[0]:
        raise DegenerateConfigurationError(
            "cross-covariance is rank deficient", context={"singular_values": singular.tolist()}
        )

    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = fixed_centroid - rotation @ moving_centroid
    aligned = moving.points @ rotation.T + translation
    residual = float(((aligned - fixed.points) ** 2).sum())
    return RigidAlignment(rotation=rotation, translation=translation, aligned=LandmarkSet(aligned), residual=residual)
