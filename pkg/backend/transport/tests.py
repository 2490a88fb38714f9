import math
from unittest import mock

import numpy as np
from django.test import SimpleTestCase, tag

from geometry.exceptions import InvalidArgumentError, InvalidInputError, NumericalFailureError
from geometry.kernels import rkhs_norm
from geometry.optim import OptimConfig
from geometry.types import IntegratorConfig, KernelParams, LandmarkSet
from meshes.mesh import SubjectSequence, TriangleMesh
from meshes.metrics import ejection_fraction, signed_volume
from meshes.shapes import icosphere, tetrahedron
from stats.regression import LambdaRecord, lambda_volume_regression
import transport.ladder
from transport.ladder import (
    LadderConfig,
    MainGeodesic,
    isometry_defect,
    ladder_steps,
    pole_ladder,
    riemannian_exp,
    riemannian_log,
)
from transport.scaling import TransportStatus, fit_lambda, reconstructed_ef, scaled_transport

TIGHT = OptimConfig(max_iters=500, rel_tol=1e-14, grad_tol=1e-12)


def corner_points(half):
    return np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)], dtype=float)


def contraction(control_points, beta):
    """Momenta pointing at the origin, proportional to the distance."""
    return -beta * control_points


class ExpLogTests(SimpleTestCase):
    def setUp(self):
        self.base = icosphere(1, radius=10.0).vertices
        self.kernel = KernelParams(10.0)
        self.control_points = corner_points(8.0)
        self.integrator = IntegratorConfig(n_steps=10)
        self.rng = np.random.default_rng(31)

    def test_zero_momenta_keep_base(self):
        shot = riemannian_exp(self.base, np.zeros((8, 3)), self.control_points, self.kernel, self.integrator)
        np.testing.assert_array_equal(shot.points, self.base.points)

    def test_log_of_base_is_zero(self):
        momenta = riemannian_log(self.base, self.base, self.control_points, self.kernel, 1e-4, TIGHT)
        np.testing.assert_array_equal(momenta, np.zeros((8, 3)))

    def test_exp_then_log(self):
        for _ in range(3):
            momenta = self.rng.normal(size=(8, 3))
            momenta *= 0.1 * self.base.diameter() / rkhs_norm(self.control_points, momenta, self.kernel)
            target = riemannian_exp(self.base, momenta, self.control_points, self.kernel, self.integrator)
            recovered = riemannian_log(self.base, target, self.control_points, self.kernel, 1e-4,
                                       OptimConfig(max_iters=2000, rel_tol=1e-14, grad_tol=1e-12))
            error = np.linalg.norm(recovered - momenta) / np.linalg.norm(momenta)
            self.assertLessEqual(error, 1e-3)

    def test_log_is_nearly_inverse_consistent(self):
        momenta = 0.1 * contraction(self.control_points, 0.3)
        target = riemannian_exp(self.base, momenta, self.control_points, self.kernel, self.integrator)
        forward = riemannian_log(self.base, target, self.control_points, self.kernel, 1e-4, TIGHT)
        back = riemannian_exp(target, -forward, self.control_points, self.kernel, self.integrator)
        error = np.sqrt(((back.points - self.base.points) ** 2).sum(axis=1)).max()
        self.assertLessEqual(error, 0.01 * self.base.diameter())


### Equivalence classes ###
##  Pole ladder
#       zero-length main geodesic       (identity)
#       zero vector                     (zero)
#       flat kernel                     (translation, identity)
#       n_rungs < 1, scale outside (0,1] (invalid)

class PoleLadderTests(SimpleTestCase):
    def setUp(self):
        self.base = icosphere(1, radius=10.0).vertices
        self.kernel = KernelParams(10.0)
        self.control_points = corner_points(8.0)
        self.integrator = IntegratorConfig(n_steps=10)
        self.rng = np.random.default_rng(7)

    def geodesic(self, momenta, kernel=None):
        return MainGeodesic(self.base, momenta, self.control_points, kernel or self.kernel, self.integrator)

    def test_trivial_geodesic_is_identity(self):
        w = self.rng.normal(scale=2.0, size=(8, 3))
        result = pole_ladder(self.geodesic(np.zeros((8, 3))), w, LadderConfig(n_rungs=3, optim=TIGHT), 1e-4)
        np.testing.assert_allclose(result.momenta, w, rtol=0, atol=1e-6 * np.abs(w).max())
        np.testing.assert_array_equal(result.control_points, self.control_points)
        self.assertLessEqual(result.isometry_defect, 1e-6)

    def test_zero_vector(self):
        geo = self.geodesic(self.rng.normal(size=(8, 3)))
        result = pole_ladder(geo, np.zeros((8, 3)), LadderConfig(n_rungs=2), 1e-4)
        np.testing.assert_array_equal(result.momenta, np.zeros((8, 3)))

    def test_flat_kernel_limit(self):
        kernel = KernelParams(100.0 * self.base.diameter())
        geo = self.geodesic(np.tile([3.0, -1.0, 0.5], (8, 1)), kernel)
        w = np.tile([0.0, 0.2, -0.1], (8, 1))
        result = pole_ladder(geo, w, LadderConfig(n_rungs=2, optim=TIGHT), 1e-4)
        self.assertLessEqual(np.linalg.norm(result.momenta - w) / np.linalg.norm(w), 1e-2)

    def climbed_scales(self, ladder, side_effect=None):
        main = 0.3 * contraction(self.control_points, 0.5) + [1.0, 0.0, 0.0]
        w = 0.5 * self.rng.normal(size=(8, 3))
        with mock.patch("transport.ladder._climb", wraps=transport.ladder._climb,
                        side_effect=side_effect) as climb:
            result = pole_ladder(self.geodesic(main), w, ladder, 1e-4)
        return [call.args[2] for call in climb.call_args_list], result

    def test_iteration_budget_keeps_rung_scale(self):
        scales, result = self.climbed_scales(LadderConfig(n_rungs=2, optim=OptimConfig(max_iters=3)))
        self.assertEqual(scales, [1.0])
        self.assertEqual(result.rung_scale, 1.0)
        self.assertFalse(result.converged)

    def test_stagnation_halves_rung_scale(self):
        outcomes = iter([(np.ones((8, 3)), False, True), (np.ones((8, 3)), True, False)])
        scales, result = self.climbed_scales(LadderConfig(n_rungs=2), side_effect=lambda *args: next(outcomes))
        self.assertEqual(scales, [1.0, 0.5])
        self.assertEqual(result.rung_scale, 0.5)
        self.assertTrue(result.converged)

    def test_numerical_failure_halves_rung_scale(self):
        def climb(nodes, w, scale, *args):
            if scale == 1.0:
                raise NumericalFailureError("gradient is not finite")
            return np.ones((8, 3)), True, False

        scales, result = self.climbed_scales(LadderConfig(n_rungs=2), side_effect=climb)
        self.assertEqual(scales, [1.0, 0.5])
        self.assertEqual(result.rung_scale, 0.5)

    def test_numerical_failure_at_smallest_scale_is_raised(self):
        def climb(*args):
            raise NumericalFailureError("gradient is not finite")

        with self.assertRaises(NumericalFailureError):
            self.climbed_scales(LadderConfig(n_rungs=2, max_scale_halvings=1), side_effect=climb)

    def test_shape_mismatch(self):
        with self.assertRaises(InvalidArgumentError):
            pole_ladder(self.geodesic(np.zeros((8, 3))), np.zeros((3, 3)), LadderConfig(), 1.0)

    def test_ladder_config_validation(self):
        with self.assertRaises(InvalidArgumentError):
            LadderConfig(n_rungs=0)
        with self.assertRaises(InvalidArgumentError):
            LadderConfig(rung_scale=1.5)
        with self.assertRaises(InvalidArgumentError):
            LadderConfig(rung_scale=0.0)

    def test_ladder_grid(self):
        self.assertEqual(ladder_steps(10, 5), 10)
        self.assertEqual(ladder_steps(10, 4), 16)
        self.assertEqual(ladder_steps(1, 1), 2)

    def test_isometry_defect(self):
        self.assertEqual(isometry_defect(2.0, 2.0), 0.0)
        self.assertAlmostEqual(isometry_defect(2.0, 2.02), 0.01)
        self.assertEqual(isometry_defect(0.0, 0.0), 0.0)

    @tag("slow")
    def test_moderate_transport_is_nearly_isometric(self):
        main = 0.3 * contraction(self.control_points, 0.5) + [1.0, 0.0, 0.0]
        w = 0.5 * self.rng.normal(size=(8, 3))
        result = pole_ladder(self.geodesic(main), w, LadderConfig(n_rungs=5, optim=TIGHT), 1e-4)
        self.assertLessEqual(result.isometry_defect, 0.01)

    @tag("slow")
    def test_error_decays_with_rungs(self):
        main = 0.4 * contraction(self.control_points, 0.5) + [1.5, -0.5, 0.0]
        w = 0.3 * self.rng.normal(size=(8, 3))
        tighter = OptimConfig(max_iters=2000, rel_tol=1e-15, grad_tol=1e-13)
        geo = self.geodesic(main)
        reference = pole_ladder(geo, w, LadderConfig(n_rungs=64, optim=tighter), 1e-6).momenta
        errors = [
            np.linalg.norm(pole_ladder(geo, w, LadderConfig(n_rungs=n, optim=tighter), 1e-6).momenta - reference)
            for n in (2, 4, 8)
        ]
        order = math.log2(errors[0] / errors[2]) / 2.0
        self.assertGreaterEqual(order, 1.7)


class LambdaFitTests(SimpleTestCase):
    def test_smooth_target(self):
        value = fit_lambda(lambda s: 0.5 * (1.0 - math.exp(-s)), 0.3)
        self.assertAlmostEqual(value, -math.log(0.4), places=5)

    def test_bracket_grows(self):
        self.assertAlmostEqual(fit_lambda(lambda s: 0.01 * s, 0.1), 10.0, places=5)


class ScaledTransportTests(SimpleTestCase):
    def setUp(self):
        self.kernel = KernelParams(10.0)
        self.control_points = corner_points(8.0)
        self.integrator = IntegratorConfig(n_steps=10)
        self.atlas = icosphere(1, radius=10.0)

    def subject(self, ed, beta=0.3, subject_id="s1"):
        momenta = contraction(self.control_points, beta)
        frames = [ed]
        for factor in (0.5, 1.0):
            moved = riemannian_exp(ed.vertices, factor * momenta, self.control_points, self.kernel, self.integrator)
            frames.append(ed.with_vertices(moved))
        return SubjectSequence(subject_id, "Control", frames, ed_index=0, es_index=2)

    def test_reconstructed_ef_is_monotone(self):
        momenta = contraction(self.control_points, 0.1)
        volume = signed_volume(self.atlas)
        values = [
            reconstructed_ef(self.atlas, volume, momenta, self.control_points, self.kernel, self.integrator, s)
            for s in np.linspace(0.1, 2.0, 10)
        ]
        self.assertTrue(all(b > a for a, b in zip(values, values[1:])))

    def test_zero_scale_reconstructs_atlas(self):
        volume = signed_volume(self.atlas)
        momenta = contraction(self.control_points, 0.3)
        self.assertEqual(
            reconstructed_ef(self.atlas, volume, momenta, self.control_points, self.kernel, self.integrator, 0.0),
            0.0,
        )

    def test_subject_identical_to_atlas(self):
        subject = self.subject(self.atlas, beta=0.15)
        result = scaled_transport(subject, self.atlas, self.control_points, self.kernel, 1e-4,
                                  LadderConfig(n_rungs=2, optim=TIGHT), optim_config=TIGHT,
                                  integrator=self.integrator)
        self.assertAlmostEqual(result.lambda_, 1.0, delta=1e-3)
        self.assertEqual(result.status, TransportStatus.OK)
        self.assertAlmostEqual(result.ef_unscaled, result.ef_original, delta=5e-3)
        self.assertEqual(len(result.transported_momenta), 3)
        np.testing.assert_array_equal(result.transported_momenta[0], np.zeros((8, 3)))

    @tag("slow")
    def test_larger_subject_keeps_ef(self):
        ed = self.atlas.with_vertices(self.atlas.vertices.scaled(1.2))
        subject = self.subject(ed, beta=0.25)
        result = scaled_transport(subject, self.atlas, self.control_points, self.kernel, 1e-3,
                                  LadderConfig(n_rungs=3, optim=OptimConfig(max_iters=300)),
                                  optim_config=OptimConfig(max_iters=300), integrator=self.integrator)
        self.assertLessEqual(abs(result.ef_reconstructed - ejection_fraction(subject)), 0.005)
        reconstructed = result.reconstruct(self.atlas, self.kernel, self.integrator)
        self.assertEqual(len(reconstructed), 3)
        np.testing.assert_allclose(reconstructed[0].points, self.atlas.points)

    @tag("slow")
    def test_lambda_falls_with_ed_volume(self):
        budget = OptimConfig(max_iters=300)
        ladder = LadderConfig(n_rungs=2, optim=budget)
        records = []
        for factor in (0.8, 0.9, 1.0, 1.1, 1.25):
            ed = self.atlas.with_vertices(self.atlas.vertices.scaled(factor))
            subject = self.subject(ed, beta=0.25, subject_id=f"s{factor}")
            result = scaled_transport(subject, self.atlas, self.control_points, self.kernel, 1e-3, ladder,
                                      optim_config=budget, integrator=self.integrator)
            self.assertLessEqual(abs(result.ef_reconstructed - result.ef_original), 0.005)
            records.append(LambdaRecord(subject.subject_id, result.lambda_, signed_volume(ed)))
        self.assertLess(records[-1].lambda_, records[0].lambda_)
        regression = lambda_volume_regression(records, signed_volume(self.atlas))
        self.assertGreater(regression.slope, 0.0)
        self.assertGreaterEqual(regression.r_squared, 0.5)

    def test_open_mesh_is_rejected(self):
        mesh = tetrahedron()
        opened = TriangleMesh(mesh.vertices, mesh.triangles[:-1])
        subject = SubjectSequence("open", "Control", [opened, opened.with_vertices(opened.vertices.scaled(0.9))])
        with self.assertRaises(InvalidInputError):
            scaled_transport(subject, mesh, np.zeros((1, 3)), self.kernel, 1.0)

    def test_vertex_count_mismatch(self):
        subject = self.subject(self.atlas)
        with self.assertRaises(InvalidArgumentError):
            scaled_transport(subject, icosphere(2), self.control_points, self.kernel, 1.0)


class MainGeodesicTests(SimpleTestCase):
    def test_endpoint_and_triviality(self):
        base = LandmarkSet(np.random.default_rng(0).normal(size=(5, 3)))
        geo = MainGeodesic(base, np.zeros((2, 3)), np.eye(3)[:2], KernelParams(1.0))
        self.assertTrue(geo.is_trivial())
        np.testing.assert_array_equal(geo.endpoint().points, base.points)
