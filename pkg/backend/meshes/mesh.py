"""
Triangle meshes and per-subject systolic sequences.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import trimesh

from geometry.exceptions import InvalidArgumentError, InvalidInputError
from geometry.types import LandmarkSet


class Group(str, Enum):
    CONTROL = "Control"
    ASD = "ASD"
    TOF = "ToF"
    PHT = "PHT"


def as_triangles(values, n_vertices=None):
    triangles = np.asarray(values)
    if triangles.size == 0:
        triangles = triangles.reshape(0, 3)
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise InvalidArgumentError("triangles must have shape (M, 3)", context={"shape": triangles.shape})
    if not np.issubdtype(triangles.dtype, np.integer):
        if not np.all(np.equal(np.mod(triangles, 1), 0)):
            raise InvalidArgumentError("triangle indices must be integers")
    triangles = triangles.astype(np.int64)
    if triangles.size and triangles.min() < 0:
        raise InvalidInputError("triangle indices must be non-negative")
    if n_vertices is not None and triangles.size and triangles.max() >= n_vertices:
        raise InvalidInputError(
            "triangle index out of range", context={"max_index": int(triangles.max()), "vertices": n_vertices}
        )
    return triangles


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Surface mesh with 0-based, consistently oriented triangles."""

    vertices: LandmarkSet
    triangles: np.ndarray

    def __post_init__(self):
        if not isinstance(self.vertices, LandmarkSet):
            object.__setattr__(self, "vertices", LandmarkSet(self.vertices))
        object.__setattr__(self, "triangles", as_triangles(self.triangles, len(self.vertices)))

    @property
    def points(self):
        return self.vertices.points

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def with_vertices(self, vertices):
        """Same topology, new vertex positions."""
        if not isinstance(vertices, LandmarkSet):
            vertices = LandmarkSet(vertices)
        if len(vertices) != self.n_vertices:
            raise InvalidArgumentError(
                "vertex count differs from the mesh topology",
                context={"expected": self.n_vertices, "got": len(vertices)},
            )
        return TriangleMesh(vertices, self.triangles)

    def flipped(self):
        """Reverse the orientation of every triangle."""
        return TriangleMesh(self.vertices, self.triangles[:, ::-1].copy())

    def to_trimesh(self):
        """Trimesh view with vertex order and faces kept as they are (no merging or reordering)."""
        return trimesh.Trimesh(vertices=self.points, faces=self.triangles, process=False, validate=False)

    @classmethod
    def from_trimesh(cls, mesh):
        return cls(LandmarkSet(np.asarray(mesh.vertices, dtype=np.float64)), np.asarray(mesh.faces))


@dataclass(frozen=True, eq=False)
class SubjectSequence:
    """Systolic sequence of one subject; every frame shares one triangle table."""

    subject_id: str
    group: str
    frames: list = field(default_factory=list)
    ed_index: int = 0
    es_index: int = -1

    def __post_init__(self):
        frames = list(self.frames)
        if len(frames) < 2:
            raise InvalidInputError("a sequence needs at least two frames", context={"subject": self.subject_id})
        n_frames = len(frames)
        ed_index = self.ed_index % n_frames
        es_index = self.es_index % n_frames
        if ed_index == es_index:
            raise InvalidInputError("ED and ES frames must differ", context={"subject": self.subject_id})
        reference = frames[0]
        for index, frame in enumerate(frames[1:], start=1):
            if frame.n_vertices != reference.n_vertices or not np.array_equal(frame.triangles, reference.triangles):
                raise InvalidInputError(
                    "frames do not share one topology",
                    context={"subject": self.subject_id, "frame": index},
                )
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "ed_index", ed_index)
        object.__setattr__(self, "es_index", es_index)

    @property
    def triangles(self):
        return self.frames[0].triangles

    @property
    def ed(self):
        return self.frames[self.ed_index]

    @property
    def es(self):
        return self.frames[self.es_index]

    def __len__(self):
        return len(self.frames)

    def with_frames(self, frames):
        return SubjectSequence(self.subject_id, self.group, frames, self.ed_index, self.es_index)
