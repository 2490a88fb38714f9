import os
import tempfile

import numpy as np
from django.test import SimpleTestCase, tag

from geometry.exceptions import InvalidArgumentError, InvalidInputError
from geometry.kernels import rkhs_norm_sq
from geometry.optim import OptimConfig, StopReason
from geometry.shooting import shoot
from geometry.types import ControlSystem, IntegratorConfig, KernelParams, LandmarkSet, to_numpy
from meshes.shapes import icosphere
from registration.atlas import estimate_atlas
from registration.control_points import grid_points, initial_control_points, optimize_control_points
from registration.io import read_control_points, read_momenta, write_control_points, write_momenta
from registration.lddmm import RegistrationProblem, default_alpha, register, registration_cost


def cube_grid(low, high, per_axis=3):
    axis = np.linspace(low, high, per_axis)
    return np.array([[x, y, z] for x in axis for y in axis for z in axis])


### Equivalence classes ###
##  Registration problem
#       target = template               (zero cost)
#       target = translated template    (identity flow cost)
#       point counts differ             (invalid)
#       alpha <= 0                      (invalid)
#       momenta shape mismatch          (invalid)

class RegistrationCostTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(21)
        self.kernel = KernelParams(10.0)
        self.template = LandmarkSet(self.rng.uniform(0.0, 30.0, size=(12, 3)))
        self.control_points = self.rng.uniform(0.0, 30.0, size=(6, 3))

    def problem(self, target, alpha=1.0):
        return RegistrationProblem(self.template, target, self.kernel, alpha, self.control_points,
                                   IntegratorConfig(n_steps=8))

    def test_zero_cost_for_identical_shapes(self):
        problem = self.problem(self.template)
        self.assertEqual(registration_cost(problem, np.zeros((6, 3))), 0.0)

    def test_translated_target(self):
        d = np.array([1.5, -2.0, 0.5])
        problem = self.problem(self.template.translated(d))
        self.assertAlmostEqual(registration_cost(problem, np.zeros((6, 3))), 12 * float(d @ d), places=9)

    def test_matches_shoot_and_norm(self):
        target = LandmarkSet(self.template.points + self.rng.normal(size=(12, 3)))
        problem = self.problem(target, alpha=2.5)
        momenta = self.rng.normal(scale=3.0, size=(6, 3))
        system = ControlSystem(self.control_points, momenta)
        endpoint = to_numpy(shoot(system, self.template, self.kernel, IntegratorConfig(n_steps=8)).final_landmarks())
        expected = ((target.points - endpoint) ** 2).sum() + 2.5 ** 2 * rkhs_norm_sq(system, self.kernel)
        self.assertAlmostEqual(registration_cost(problem, momenta) / expected, 1.0, places=10)

    def test_invalid_problems(self):
        with self.assertRaises(InvalidArgumentError):
            self.problem(LandmarkSet(self.template.points[:5]))
        with self.assertRaises(InvalidArgumentError):
            self.problem(self.template, alpha=0.0)
        with self.assertRaises(InvalidArgumentError):
            registration_cost(self.problem(self.template), np.zeros((5, 3)))

    def test_default_alpha(self):
        self.assertAlmostEqual(default_alpha(LandmarkSet([[0, 0, 0], [3, 4, 0]])), 0.5)


class RegisterTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(4)
        self.kernel = KernelParams(8.0)
        self.template = LandmarkSet(self.rng.uniform(-10.0, 10.0, size=(10, 3)))
        self.control_points = self.rng.uniform(-10.0, 10.0, size=(5, 3))

    def test_identity_registration(self):
        problem = RegistrationProblem(self.template, self.template, self.kernel, 1.0, self.control_points)
        result = register(problem)
        self.assertLessEqual(result.total_cost, 1e-10)
        self.assertLessEqual(np.abs(result.momenta).max(), 1e-6)
        self.assertEqual(result.status, StopReason.GRADIENT)
        self.assertEqual(result.geodesic_length, 0.0)

    def test_distance_is_positive_for_distinct_shapes(self):
        target = self.template.scaled(0.9)
        problem = RegistrationProblem(self.template, target, self.kernel, 1.0, self.control_points)
        result = register(problem, OptimConfig(max_iters=100))
        self.assertGreater(result.geodesic_length, 0.0)
        self.assertLess(result.data_term, ((target.points - self.template.points) ** 2).sum())
        self.assertAlmostEqual(result.total_cost, result.data_term + result.reg_term)

    def test_trace_is_non_increasing(self):
        target = LandmarkSet(self.template.points + self.rng.normal(scale=0.5, size=(10, 3)))
        problem = RegistrationProblem(self.template, target, self.kernel, 0.5, self.control_points)
        result = register(problem, OptimConfig(max_iters=50))
        self.assertTrue(all(b <= a for a, b in zip(result.trace, result.trace[1:])))

    def test_regularity_decreases_with_alpha(self):
        template = LandmarkSet(self.rng.uniform(-5.0, 5.0, size=(6, 3)))
        target = template.translated([2.0, 1.0, 0.0])
        reg_terms = []
        for alpha in (0.5, 1.0, 2.0, 4.0):
            problem = RegistrationProblem(template, target, self.kernel, alpha, template.points)
            reg_terms.append(register(problem, OptimConfig(max_iters=400)).reg_term)
        for smaller, larger in zip(reg_terms, reg_terms[1:]):
            self.assertLessEqual(larger, smaller + 1e-9)

    @tag("slow")
    def test_icosphere_contraction(self):
        radius = 1.0
        template = icosphere(2, radius=radius).vertices
        target = template.scaled(0.8)
        problem = RegistrationProblem(
            template, target, KernelParams(radius), 0.1, cube_grid(-radius, radius), IntegratorConfig(n_steps=10)
        )
        result = register(problem, OptimConfig(max_iters=200))
        self.assertEqual(len(template), 162)
        self.assertLessEqual(result.data_term, 1e-3 * len(template) * radius ** 2)
        self.assertLessEqual(result.iterations, 200)


class AtlasTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(8)
        self.base = LandmarkSet(self.rng.uniform(-5.0, 5.0, size=(10, 3)))
        self.control_points = self.rng.uniform(-5.0, 5.0, size=(4, 3))

    def test_identical_shapes(self):
        result = estimate_atlas([self.base, self.base, self.base], KernelParams(5.0), 1.0, self.control_points,
                                outer_iters=3)
        np.testing.assert_allclose(result.atlas.points, self.base.points, atol=1e-12)
        for registration in result.registrations:
            self.assertLessEqual(np.abs(registration.momenta).max(), 1e-12)

    def test_symmetric_translates(self):
        d = np.array([2.0, 0.0, 0.0])
        shapes = [self.base.translated(d), self.base.translated(-d)]
        result = estimate_atlas(shapes, KernelParams(100.0 * self.base.diameter()), 0.1, self.control_points,
                                OptimConfig(max_iters=50), outer_iters=3)
        error = np.abs(result.atlas.points - self.base.points).max()
        self.assertLessEqual(error, 1e-2 * np.linalg.norm(d))

    def test_objective_trace_is_non_increasing(self):
        shapes = [LandmarkSet(self.base.points + self.rng.normal(scale=0.8, size=(10, 3))) for _ in range(3)]
        result = estimate_atlas(shapes, KernelParams(5.0), 0.5, self.control_points,
                                OptimConfig(max_iters=30), outer_iters=3)
        for previous, current in zip(result.trace, result.trace[1:]):
            self.assertLessEqual(current, previous + 1e-9 * abs(previous) + 1e-12)
        self.assertLess(result.objective, result.trace[0])

    def test_parallel_matches_serial(self):
        shapes = [LandmarkSet(self.base.points + self.rng.normal(scale=0.5, size=(10, 3))) for _ in range(3)]
        serial = estimate_atlas(shapes, KernelParams(5.0), 0.5, self.control_points,
                                OptimConfig(max_iters=10), outer_iters=2)
        parallel = estimate_atlas(shapes, KernelParams(5.0), 0.5, self.control_points,
                                  OptimConfig(max_iters=10), outer_iters=2, workers=3)
        np.testing.assert_array_equal(serial.atlas.points, parallel.atlas.points)

    def test_needs_two_shapes(self):
        with self.assertRaises(InvalidArgumentError):
            estimate_atlas([self.base], KernelParams(5.0), 1.0, self.control_points)


class ControlPointTests(SimpleTestCase):
    def setUp(self):
        self.atlas = icosphere(1, radius=20.0).vertices
        self.kernel = KernelParams(15.0)

    def test_grid_covers_inflated_box(self):
        grid = grid_points(self.atlas, 4)
        self.assertEqual(grid.shape, (64, 3))
        np.testing.assert_allclose(grid.max(axis=0), self.atlas.points.max(axis=0) * 1.1)

    def test_initial_points_are_distinct(self):
        points = initial_control_points(self.atlas, 60)
        self.assertEqual(points.shape, (60, 3))
        self.assertEqual(len(np.unique(points, axis=0)), 60)
        np.testing.assert_array_equal(points, initial_control_points(self.atlas, 60))

    def test_single_identical_target_keeps_grid(self):
        initial = initial_control_points(self.atlas, 8)
        result = optimize_control_points(self.atlas, [self.atlas], 8, self.kernel, 1.0)
        np.testing.assert_array_equal(result.control_points, initial)
        self.assertEqual(result.status, StopReason.GRADIENT)

    def test_descent_from_grid(self):
        targets = [self.atlas.scaled(0.85), self.atlas.scaled(0.9).translated([1.0, 0.0, 0.0])]
        result = optimize_control_points(self.atlas, targets, 8, self.kernel, 1.0, OptimConfig(max_iters=15),
                                         IntegratorConfig(n_steps=5))
        self.assertLessEqual(result.cost, result.initial_cost)
        self.assertEqual(len(result.momenta), 2)

    def test_needs_targets(self):
        with self.assertRaises(InvalidArgumentError):
            optimize_control_points(self.atlas, [], 8, self.kernel, 1.0)


class MomentaIOTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.rng = np.random.default_rng(2)

    def test_write_then_read(self):
        control_points = self.rng.normal(size=(7, 3))
        momenta = self.rng.normal(size=(7, 3))
        path = write_momenta(os.path.join(self.tmp.name, "m", "momenta.csv"), control_points, momenta)
        loaded_cps, loaded_momenta = read_momenta(path)
        np.testing.assert_array_equal(loaded_cps, control_points)
        np.testing.assert_array_equal(loaded_momenta, momenta)
        with open(path, encoding="utf-8") as handle:
            self.assertEqual(handle.readline(), "cx,cy,cz,mx,my,mz\n")

    def test_control_points_file(self):
        control_points = self.rng.normal(size=(4, 3))
        path = write_control_points(os.path.join(self.tmp.name, "cps.csv"), control_points)
        np.testing.assert_array_equal(read_control_points(path), control_points)

    def test_header_is_required(self):
        path = os.path.join(self.tmp.name, "bad.csv")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("1,2,3,4,5,6\n")
        with self.assertRaises(InvalidInputError):
            read_momenta(path)
