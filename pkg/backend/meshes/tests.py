import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from geometry.exceptions import (
    DegenerateConfigurationError,
    InvalidArgumentError,
    InvalidInputError,
    MeshParseError,
)
from geometry.types import LandmarkSet
from meshes.alignment import rigid_align
from meshes.io import read_mesh, write_mesh
from meshes.mesh import SubjectSequence, TriangleMesh
from meshes.metrics import (
    area_strain,
    area_strain_between,
    check_closed,
    ejection_fraction,
    open_edges,
    rmse_per_cell,
    signed_volume,
)
from meshes.shapes import icosphere, tetrahedron, unit_cube, ventricle


def random_rotation(rng):
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quaternion_residual(moving, fixed):
    """Least-squares rigid residual from the unit quaternion solution of the absolute orientation problem."""
    m = moving - moving.mean(axis=0)
    f = fixed - fixed.mean(axis=0)
    s = m.T @ f
    n = np.array([
        [s[0, 0] + s[1, 1] + s[2, 2], s[1, 2] - s[2, 1], s[2, 0] - s[0, 2], s[0, 1] - s[1, 0]],
        [s[1, 2] - s[2, 1], s[0, 0] - s[1, 1] - s[2, 2], s[0, 1] + s[1, 0], s[2, 0] + s[0, 2]],
        [s[2, 0] - s[0, 2], s[0, 1] + s[1, 0], -s[0, 0] + s[1, 1] - s[2, 2], s[1, 2] + s[2, 1]],
        [s[0, 1] - s[1, 0], s[2, 0] + s[0, 2], s[1, 2] + s[2, 1], -s[0, 0] - s[1, 1] + s[2, 2]],
    ])
    largest = np.linalg.eigvalsh(n)[-1]
    return float((m ** 2).sum() + (f ** 2).sum() - 2.0 * largest)


def scaled_mesh(mesh, factor):
    return mesh.with_vertices(mesh.vertices.scaled(factor))


### Equivalence classes ###
##  Volume
#       closed, outward oriented        (positive)
#       closed, inward oriented         (negative)
#       open surface                    (invalid)
##  Ejection fraction / area strain
#       ES = ED                         (zero)
#       ES = scaled ED                  (scaling law)
#       degenerate ED cell              (excluded, counted)

class VolumeTests(SimpleTestCase):
    def test_unit_solids(self):
        self.assertAlmostEqual(signed_volume(tetrahedron()), 1.0 / 6.0, places=12)
        self.assertAlmostEqual(signed_volume(unit_cube()), 1.0, places=12)

    def test_scaling_is_cubic(self):
        mesh = icosphere(2, radius=3.0)
        for factor in (0.5, 0.8337, 2.0):
            expected = factor ** 3 * signed_volume(mesh)
            self.assertAlmostEqual(signed_volume(scaled_mesh(mesh, factor)) / expected, 1.0, places=12)

    def test_flipping_orientation_negates_volume(self):
        for mesh in (unit_cube(), icosphere(1), ventricle()):
            self.assertAlmostEqual(signed_volume(mesh.flipped()) / -signed_volume(mesh), 1.0, places=12)

    def test_translation_invariance(self):
        mesh = ventricle()
        moved = mesh.with_vertices(mesh.vertices.translated([120.0, -40.0, 75.0]))
        self.assertLessEqual(abs(signed_volume(moved) / signed_volume(mesh) - 1.0), 1e-9)

    def test_open_mesh_is_rejected(self):
        mesh = tetrahedron()
        opened = TriangleMesh(mesh.vertices, mesh.triangles[:-1])
        with self.assertRaises(InvalidInputError) as ctx:
            signed_volume(opened)
        self.assertEqual(ctx.exception.code, "open_mesh")
        self.assertGreater(ctx.exception.context["count"], 0)

    def test_inconsistent_winding_is_rejected(self):
        mesh = tetrahedron()
        triangles = mesh.triangles.copy()
        triangles[0] = triangles[0][::-1]
        with self.assertRaises(InvalidInputError) as ctx:
            check_closed(TriangleMesh(mesh.vertices, triangles))
        self.assertEqual(ctx.exception.context["count"], 0)

    def test_open_edges_of_a_missing_face(self):
        mesh = tetrahedron()
        opened = TriangleMesh(mesh.vertices, mesh.triangles[:-1])
        self.assertEqual(open_edges(opened), [(1, 2), (1, 3), (2, 3)])
        self.assertEqual(open_edges(mesh), [])

    def test_reference_shapes_are_closed(self):
        for mesh in (tetrahedron(), unit_cube(), icosphere(2), ventricle()):
            check_closed(mesh)
        self.assertGreater(signed_volume(ventricle()), 0)

    def test_icosphere_size(self):
        self.assertEqual(icosphere(2).n_vertices, 162)
        self.assertEqual(icosphere(2).n_triangles, 320)


    def test_icosphere_is_centered_on_its_radius(self):
        mesh = icosphere(1, radius=4.0, center=(1.0, -2.0, 3.0))
        distances = np.linalg.norm(mesh.points - [1.0, -2.0, 3.0], axis=1)
        np.testing.assert_allclose(distances, 4.0, atol=1e-9)
        self.assertGreater(signed_volume(mesh), 0)

    def test_trimesh_view_keeps_vertex_order(self):
        mesh = ventricle()
        surface = mesh.to_trimesh()
        np.testing.assert_array_equal(surface.vertices, mesh.points)
        np.testing.assert_array_equal(surface.faces, mesh.triangles)
        self.assertTrue(surface.is_watertight)
        self.assertAlmostEqual(float(surface.volume) / signed_volume(mesh), 1.0, places=9)
        back = TriangleMesh.from_trimesh(surface)
        np.testing.assert_array_equal(back.points, mesh.points)

class CardiacMetricTests(SimpleTestCase):
    def setUp(self):
        self.ed = ventricle()

    def sequence(self, es):
        return SubjectSequence("s1", "Control", [self.ed, es])

    def test_ejection_fraction_scaling_law(self):
        s = 0.8337
        ef = ejection_fraction(self.sequence(scaled_mesh(self.ed, s)))
        self.assertAlmostEqual(ef, 1 - s ** 3, places=12)
        self.assertAlmostEqual(ef, 0.4205, places=3)

    def test_identical_frames(self):
        self.assertEqual(ejection_fraction(self.sequence(self.ed)), 0.0)
        strain = area_strain(self.sequence(self.ed), 1)
        np.testing.assert_array_equal(strain.values, np.zeros(self.ed.n_triangles))
        self.assertEqual(strain.excluded, 0)

    def test_ef_invariant_under_rigid_motion(self):
        rng = np.random.default_rng(3)
        es = scaled_mesh(self.ed, 0.85)
        rotation = random_rotation(rng)
        moved = es.with_vertices(es.points @ rotation.T + [10.0, 5.0, -3.0])
        self.assertLessEqual(
            abs(ejection_fraction(self.sequence(moved)) - ejection_fraction(self.sequence(es))), 1e-12
        )

    def test_area_strain_scaling_law(self):
        s = 0.9
        strain = area_strain(self.sequence(scaled_mesh(self.ed, s)), 1)
        np.testing.assert_allclose(strain.values, s ** 2 - 1, atol=1e-12)
        self.assertAlmostEqual(strain.mean(), s ** 2 - 1, places=12)

    def test_degenerate_cells_are_excluded(self):
        vertices = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]]
        reference = TriangleMesh(vertices, [[0, 1, 2], [0, 1, 3]])
        deformed = reference.with_vertices(np.array(vertices, dtype=float) * 2.0)
        with self.assertLogs("meshes.metrics", level="WARNING"):
            strain = area_strain_between(reference, deformed)
        self.assertEqual(strain.excluded, 1)
        self.assertTrue(np.isnan(strain.values[1]))
        self.assertAlmostEqual(strain.values[0], 3.0)
        self.assertAlmostEqual(strain.mean(), 3.0)

    def test_non_positive_ed_volume(self):
        with self.assertRaises(InvalidInputError):
            ejection_fraction(SubjectSequence("s1", "ASD", [self.ed.flipped(), self.ed.flipped()], 0, 1))

    def test_sequence_validation(self):
        with self.assertRaises(InvalidInputError):
            SubjectSequence("s1", "Control", [self.ed])
        with self.assertRaises(InvalidInputError):
            SubjectSequence("s1", "Control", [self.ed, self.ed], ed_index=1, es_index=1)
        with self.assertRaises(InvalidInputError):
            SubjectSequence("s1", "Control", [self.ed, icosphere(1)])
        sequence = SubjectSequence("s1", "Control", [self.ed, self.ed, self.ed])
        self.assertEqual(sequence.es_index, 2)


class RmseTests(SimpleTestCase):
    def test_identical_values(self):
        values = np.random.default_rng(0).normal(size=(5, 7))
        per_cell, mean = rmse_per_cell(values, values)
        np.testing.assert_array_equal(per_cell, np.zeros(7))
        self.assertEqual(mean, 0.0)

    def test_constant_offset(self):
        values = np.random.default_rng(1).normal(size=(4, 6))
        per_cell, mean = rmse_per_cell(values, values + 0.25)
        np.testing.assert_allclose(per_cell, 0.25, atol=1e-12)
        self.assertAlmostEqual(mean, 0.25, places=12)

    def test_shape_mismatch(self):
        with self.assertRaises(InvalidArgumentError):
            rmse_per_cell(np.zeros((3, 2)), np.zeros((2, 3)))


class RigidAlignmentTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.fixed = LandmarkSet(self.rng.normal(scale=20.0, size=(40, 3)))

    def test_identity(self):
        result = rigid_align(self.fixed, self.fixed)
        np.testing.assert_allclose(result.rotation, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(result.translation, np.zeros(3), atol=1e-10)

    def test_recovers_planted_motion(self):
        for _ in range(10):
            rotation = random_rotation(self.rng)
            offset = self.rng.normal(scale=30.0, size=3)
            moving = LandmarkSet(self.fixed.points @ rotation.T + offset)
            result = rigid_align(moving, self.fixed)
            np.testing.assert_allclose(result.rotation, rotation.T, atol=1e-10)
            self.assertLessEqual(result.residual, 1e-10)
            self.assertAlmostEqual(np.linalg.det(result.rotation), 1.0, places=12)

    def test_idempotent(self):
        moving = LandmarkSet(self.fixed.points @ random_rotation(self.rng).T + 4.0
                             + self.rng.normal(scale=0.5, size=(40, 3)))
        first = rigid_align(moving, self.fixed)
        second = rigid_align(first.aligned, self.fixed)
        np.testing.assert_allclose(second.rotation, np.eye(3), atol=1e-10)

    def test_matches_quaternion_solver(self):
        for _ in range(5):
            noisy = self.fixed.points @ random_rotation(self.rng).T + self.rng.normal(scale=5.0, size=(40, 3))
            result = rigid_align(LandmarkSet(noisy), self.fixed)
            expected = quaternion_residual(noisy, self.fixed.points)
            self.assertLessEqual(abs(result.residual - expected), 1e-8 * max(expected, 1.0))

    def test_apply_matches_aligned(self):
        moving = LandmarkSet(self.fixed.points + [1.0, 2.0, 3.0])
        result = rigid_align(moving, self.fixed)
        np.testing.assert_allclose(result.apply(moving.points), result.aligned.points)

    def test_degenerate_inputs(self):
        line = LandmarkSet([[t, 2 * t, 0.0] for t in range(6)])
        with self.assertRaises(DegenerateConfigurationError):
            rigid_align(line, line)
        with self.assertRaises(InvalidArgumentError):
            rigid_align(LandmarkSet(self.fixed.points[:2]), LandmarkSet(self.fixed.points[:2]))
        with self.assertRaises(InvalidArgumentError):
            rigid_align(self.fixed, LandmarkSet(self.fixed.points[:5]))


TETRAHEDRON_OFF = """OFF
# unit corner tetrahedron
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3 255 0 0
"""

TETRAHEDRON_VTK = """# vtk DataFile Version 3.0
tetrahedron
ASCII
DATASET POLYDATA
POINTS 4 double
0 0 0 1 0 0
0 1 0 0 0 1
POLYGONS 4 16
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
POINT_DATA 4
SCALARS pressure double 1
LOOKUP_TABLE default
0 1 2 3
"""


class MeshIOTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def write(self, name, text):
        path = os.path.join(self.tmp.name, name)
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text)
        return path

    def test_off_fixture(self):
        mesh = read_mesh(self.write("tet.off", TETRAHEDRON_OFF))
        self.assertEqual(mesh.n_vertices, 4)
        self.assertEqual(mesh.n_triangles, 4)
        self.assertAlmostEqual(signed_volume(mesh), 1.0 / 6.0, places=12)

    def test_vtk_fixture_ignores_trailing_sections(self):
        path = self.write("tet.vtk", TETRAHEDRON_VTK)
        with self.assertLogs("meshes.io", level="WARNING"):
            mesh = read_mesh(path)
        np.testing.assert_array_equal(mesh.triangles, tetrahedron().triangles)
        np.testing.assert_array_equal(mesh.points, tetrahedron().points)

    def test_write_then_read(self):
        rng = np.random.default_rng(5)
        base = ventricle()
        mesh = base.with_vertices(base.points + rng.normal(scale=0.3, size=base.points.shape))
        for suffix in (".off", ".vtk"):
            path = write_mesh(mesh, os.path.join(self.tmp.name, "nested", "mesh" + suffix))
            loaded = read_mesh(path)
            np.testing.assert_array_equal(loaded.triangles, mesh.triangles)
            np.testing.assert_array_equal(loaded.points, mesh.points)

    def test_ply_through_trimesh(self):
        mesh = ventricle(subdivisions=1)
        loaded = read_mesh(write_mesh(mesh, os.path.join(self.tmp.name, "mesh.ply")))
        np.testing.assert_array_equal(loaded.triangles, mesh.triangles)
        np.testing.assert_allclose(loaded.points, mesh.points, atol=1e-6)

    def test_unreadable_ply(self):
        with self.assertRaises(MeshParseError):
            read_mesh(self.write("broken.ply", "ply\nformat ascii 1.0\nelement vertex 3\nend_header\n0 0\n"))

    def test_parse_error_reports_line(self):
        broken = TETRAHEDRON_OFF.replace("1 0 0\n", "1 zero 0\n", 1)
        with self.assertRaises(MeshParseError) as ctx:
            read_mesh(self.write("broken.off", broken))
        self.assertEqual(ctx.exception.line, 5)

    def test_polygons_are_rejected(self):
        quad = "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
        with self.assertRaises(MeshParseError):
            read_mesh(self.write("quad.off", quad))

    def test_truncated_file(self):
        with self.assertRaises(MeshParseError):
            read_mesh(self.write("short.off", "OFF\n4 4 0\n0 0 0\n"))

    def test_index_out_of_range(self):
        bad = TETRAHEDRON_OFF.replace("3 1 2 3 255 0 0", "3 1 2 9")
        with self.assertRaises(InvalidInputError):
            read_mesh(self.write("bad.off", bad))

    def test_binary_vtk_is_rejected(self):
        with self.assertRaises(MeshParseError):
            read_mesh(self.write("bin.vtk", TETRAHEDRON_VTK.replace("ASCII", "BINARY")))

    def test_unknown_format(self):
        with self.assertRaises(InvalidArgumentError):
            read_mesh(self.write("mesh.stl", "solid"))
