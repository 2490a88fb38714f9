"""
Reference solids and the synthetic ventricle template.
"""
import numpy as np
import trimesh

from geometry.types import LandmarkSet

from .mesh import TriangleMesh
from .metrics import signed_volume


def tetrahedron():
    """Unit corner tetrahedron, outward oriented; volume 1/6."""
    vertices = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    triangles = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]
    return TriangleMesh(LandmarkSet(vertices), triangles)


def unit_cube():
    """Unit cube as 12 outward triangles; volume 1."""
    vertices = [[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)]
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    triangles = []
    for a, b, c, d in quads:
        triangles.extend([(a, b, c), (a, c, d)])
    return TriangleMesh(LandmarkSet(vertices), triangles)


def icosphere(subdivisions=2, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Geodesic sphere: 12, 42, 162, 642 ... vertices for 0, 1, 2, 3 ... subdivisions."""
    sphere = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    mesh = TriangleMesh.from_trimesh(sphere).with_vertices(
        np.asarray(sphere.vertices, dtype=np.float64) + np.asarray(center, dtype=np.float64)
    )
    if signed_volume(mesh) < 0:
        mesh = mesh.flipped()
    return mesh


def ventricle(radius=25.0, depth=45.0, base_height=8.0, subdivisions=2):
    """
    Ventricle-like closed surface: a half-ellipsoid cavity of the given radius
    and apex depth, closed at the base by a shallow dome.
    """
    sphere = icosphere(subdivisions)
    unit = sphere.points
    z = np.where(unit[:, 2] < 0, depth * unit[:, 2], base_height * unit[:, 2])
    points = np.column_stack([radius * unit[:, 0], radius * unit[:, 1], z])
    return TriangleMesh(LandmarkSet(points), sphere.triangles)
