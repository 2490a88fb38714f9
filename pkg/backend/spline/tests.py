import json
import math
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase, tag

from geometry.exceptions import InvalidArgumentError, InvalidInputError
from geometry.kernels import rkhs_norm_sq
from geometry.optim import OptimConfig, evaluate
from geometry.shooting import shoot
from geometry.types import ControlSystem, ForceField, IntegratorConfig, KernelParams, to_numpy
from meshes.shapes import icosphere
from registration.io import file_digest, write_control_points
from registration.lddmm import RegistrationProblem, register
from spline.io import read_forces, read_spline_fit, write_forces, write_spline_fit
from spline.regression import (
    ObservationSequence,
    choose_n_steps,
    fit_spline,
    frame_steps,
    spline_cost,
    spline_terms,
)


def corner_points(half):
    return np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)], dtype=float)


def observe(start, momenta, control_points, kernel, n_steps, steps, forces=None):
    """Observations of the (forced) trajectory from ``start`` at the given grid steps."""
    result = shoot(ControlSystem(control_points, momenta), start, kernel, IntegratorConfig(n_steps),
                   None if forces is None else ForceField(forces))
    return ObservationSequence(steps, [result.landmarks_at(step) for step in steps], n_steps)


### Equivalence classes ###
##  Observation grid
#       d frames, n multiple of d - 1   (exact nodes)
#       d frames, other n               (nearest node)
#       first step != 0, last != n      (invalid)
#       repeated step                   (invalid)

class ObservationTests(SimpleTestCase):
    def setUp(self):
        self.shapes = [icosphere(0, radius=r).vertices for r in (10.0, 9.5, 9.0, 8.7)]

    def test_frame_mapping(self):
        self.assertEqual(frame_steps(4, 9), [0, 3, 6, 9])
        self.assertEqual(frame_steps(4, 10), [0, 3, 7, 10])
        self.assertEqual(choose_n_steps(4), 12)
        self.assertEqual(choose_n_steps(2), 10)
        self.assertEqual(choose_n_steps(7, minimum=4), 6)

    def test_from_frames(self):
        obs = ObservationSequence.from_frames(self.shapes)
        self.assertEqual(obs.steps, [0, 4, 8, 12])
        np.testing.assert_allclose(obs.times, [0.0, 1 / 3, 2 / 3, 1.0])
        self.assertIs(obs.start, self.shapes[0])

    def test_invalid_grids(self):
        with self.assertRaises(InvalidArgumentError):
            ObservationSequence([1, 4, 8, 12], self.shapes, 12)
        with self.assertRaises(InvalidArgumentError):
            ObservationSequence([0, 4, 8, 11], self.shapes, 12)
        with self.assertRaises(InvalidArgumentError):
            ObservationSequence([0, 4, 4, 12], self.shapes, 12)
        with self.assertRaises(InvalidArgumentError):
            ObservationSequence.from_frames(self.shapes[:1])


class SplineCostTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(12)
        self.kernel = KernelParams(10.0)
        self.control_points = corner_points(8.0)
        self.atlas = icosphere(1, radius=10.0).vertices

    def test_static_observations(self):
        obs = ObservationSequence([0, 2, 4], [self.atlas] * 3, 4)
        self.assertEqual(spline_cost(obs, np.zeros((8, 3)), None, self.control_points, self.kernel, 1.0), 0.0)

    def test_zero_forces_reduce_to_geodesic_regression(self):
        momenta = self.rng.normal(scale=0.5, size=(8, 3))
        targets = observe(self.atlas, self.rng.normal(scale=0.5, size=(8, 3)), self.control_points, self.kernel,
                          6, [0, 3, 6])
        with_none = spline_cost(targets, momenta, None, self.control_points, self.kernel, 0.7)
        with_zeros = spline_cost(targets, momenta, ForceField.zeros(6, 8), self.control_points, self.kernel, 0.7)
        self.assertEqual(with_none, with_zeros)

        trajectory = shoot(ControlSystem(self.control_points, momenta), self.atlas, self.kernel, IntegratorConfig(6))
        data = sum(((shape.points - to_numpy(trajectory.landmarks[step])) ** 2).sum()
                   for step, shape in zip(targets.steps, targets.shapes))
        expected = data / (0.7 ** 2 * 3) + rkhs_norm_sq(ControlSystem(self.control_points, momenta), self.kernel)
        self.assertAlmostEqual(with_none / expected, 1.0, places=12)

    def test_matches_shoot_and_quadrature(self):
        momenta = self.rng.normal(scale=0.5, size=(8, 3))
        forces = self.rng.normal(scale=0.2, size=(5, 8, 3))
        targets = observe(self.atlas, np.zeros((8, 3)), self.control_points, self.kernel, 5, [0, 2, 5])
        cost = spline_cost(targets, momenta, forces, self.control_points, self.kernel, 1.3)

        trajectory = shoot(ControlSystem(self.control_points, momenta), self.atlas, self.kernel, IntegratorConfig(5),
                           ForceField(forces))
        data = sum(((shape.points - to_numpy(trajectory.landmarks[step])) ** 2).sum()
                   for step, shape in zip(targets.steps, targets.shapes))
        quadrature = sum((forces[t] ** 2).sum() * 0.2 for t in range(5))
        expected = (data / (1.3 ** 2 * 3) + quadrature
                    + rkhs_norm_sq(ControlSystem(self.control_points, momenta), self.kernel))
        self.assertAlmostEqual(cost / expected, 1.0, places=10)

    def test_gradient_matches_finite_differences(self):
        obs = observe(self.atlas, self.rng.normal(scale=0.5, size=(8, 3)), self.control_points, self.kernel,
                      4, [0, 2, 4], forces=self.rng.normal(scale=0.3, size=(4, 8, 3)))
        params = {"momenta": self.rng.normal(scale=0.5, size=(8, 3)),
                  "forces": self.rng.normal(scale=0.3, size=(4, 8, 3))}
        integrator = IntegratorConfig(4)

        def objective(tensors):
            residuals, force_energy, reg = spline_terms(obs, tensors["momenta"], tensors["forces"],
                                                        self.control_points, self.kernel, 1.0, integrator)
            return residuals.sum() / 3.0 + force_energy + reg

        _, grads = evaluate(objective, params)
        for name, index in (("momenta", (2, 1)), ("forces", (1, 5, 0)), ("forces", (3, 0, 2))):
            h = 1e-5
            plus = {key: value.copy() for key, value in params.items()}
            minus = {key: value.copy() for key, value in params.items()}
            plus[name][index] += h
            minus[name][index] -= h
            numeric = (evaluate(objective, plus, with_grad=False)[0]
                       - evaluate(objective, minus, with_grad=False)[0]) / (2 * h)
            self.assertLessEqual(abs(numeric - grads[name][index]), 1e-4 * max(abs(numeric), 1e-3))

    def test_integrator_must_match_grid(self):
        obs = ObservationSequence([0, 2, 4], [self.atlas] * 3, 4)
        with self.assertRaises(InvalidArgumentError):
            spline_cost(obs, np.zeros((8, 3)), None, self.control_points, self.kernel, 1.0, IntegratorConfig(5))


class FitSplineTests(SimpleTestCase):
    def setUp(self):
        self.kernel = KernelParams(10.0)
        self.control_points = corner_points(8.0)
        self.atlas = icosphere(1, radius=10.0).vertices
        self.momenta = -0.05 * self.control_points

    def test_geodesic_observations_need_no_forces(self):
        obs = observe(self.atlas, self.momenta, self.control_points, self.kernel, 6, [0, 2, 4, 6])
        fit = fit_spline(obs, self.control_points, self.kernel, 0.001, optim_config=OptimConfig(max_iters=50),
                         initial_momenta=self.momenta)
        self.assertLessEqual(fit.force_energy, 1e-4 * fit.reg_energy)
        self.assertEqual(fit.forces.forces.shape, (6, 8, 3))
        self.assertEqual(fit.descriptor().shape, (8 * 3 * 7,))

    def test_geodesic_regression_keeps_forces_zero(self):
        obs = observe(self.atlas, self.momenta, self.control_points, self.kernel, 4, [0, 2, 4])
        fit = fit_spline(obs, self.control_points, self.kernel, 0.5, optim_config=OptimConfig(max_iters=50),
                         fit_forces=False)
        np.testing.assert_array_equal(fit.forces.forces, np.zeros((4, 8, 3)))
        self.assertEqual(fit.force_energy, 0.0)

    def test_two_frames_without_forces_match_registration(self):
        alpha = 0.5
        obs = observe(self.atlas, self.momenta, self.control_points, self.kernel, 10, [0, 10])
        config = OptimConfig(max_iters=1500, rel_tol=1e-14, grad_tol=1e-12)
        fit = fit_spline(obs, self.control_points, self.kernel, alpha, optim_config=config, fit_forces=False)
        # Two observations: 2 alpha^2 times the spline cost is the registration cost with alpha * sqrt(2).
        problem = RegistrationProblem(obs.start, obs.shapes[-1], self.kernel, alpha * math.sqrt(2.0),
                                      self.control_points, IntegratorConfig(10))
        reference = register(problem, config).momenta
        error = np.linalg.norm(fit.initial_momenta - reference) / np.linalg.norm(reference)
        self.assertLessEqual(error, 0.05)

    @tag("slow")
    def test_refit_of_forced_trajectory(self):
        rng = np.random.default_rng(40)
        forces = 0.1 * rng.normal(size=(4, 8, 3))
        obs = observe(self.atlas, self.momenta, self.control_points, self.kernel, 4, [0, 2, 4], forces=forces)
        alpha = 0.2
        generating = spline_cost(obs, self.momenta, forces, self.control_points, self.kernel, alpha)
        fit = fit_spline(obs, self.control_points, self.kernel, alpha,
                         optim_config=OptimConfig(max_iters=3000, rel_tol=1e-15, grad_tol=1e-12))
        diameter = self.atlas.diameter()
        self.assertTrue(np.all(fit.data_residuals <= 1e-3 * diameter ** 2))
        self.assertLessEqual(fit.cost, generating + 1e-6)

    def test_invalid_alpha(self):
        obs = ObservationSequence([0, 4], [self.atlas] * 2, 4)
        with self.assertRaises(InvalidArgumentError):
            fit_spline(obs, self.control_points, self.kernel, 0.0)


class SplineIOTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.rng = np.random.default_rng(9)

    def test_forces_file(self):
        forces = ForceField(self.rng.normal(size=(3, 4, 3)))
        path = write_forces(os.path.join(self.tmp.name, "forces.csv"), forces)
        np.testing.assert_array_equal(read_forces(path).forces, forces.forces)
        with open(path, encoding="utf-8") as handle:
            self.assertEqual(handle.readline(), "step,k,ux,uy,uz\n")

    def test_fit_directory(self):
        kernel = KernelParams(10.0)
        control_points = corner_points(8.0)
        atlas = icosphere(0, radius=10.0).vertices
        obs = ObservationSequence([0, 2], [atlas, atlas.scaled(0.9)], 2)
        fit = fit_spline(obs, control_points, kernel, 1.0, optim_config=OptimConfig(max_iters=5))
        cps_file = write_control_points(os.path.join(self.tmp.name, "control_points.csv"), control_points)
        directory = os.path.join(self.tmp.name, "s1")
        metadata = write_spline_fit(fit, directory, kernel, IntegratorConfig(2), cps_file)
        self.assertEqual(metadata["control_points_sha256"], file_digest(cps_file))

        loaded_cps, momenta, forces, loaded = read_spline_fit(directory)
        np.testing.assert_array_equal(loaded_cps, control_points)
        np.testing.assert_array_equal(momenta, fit.initial_momenta)
        np.testing.assert_array_equal(forces.forces, fit.forces.forces)
        self.assertEqual(loaded["sigma"], 10.0)
        self.assertEqual(loaded["n_steps"], 2)
        with open(os.path.join(directory, "spline.json"), encoding="utf-8") as handle:
            self.assertEqual(json.load(handle)["alpha"], 1.0)

    def test_incomplete_forces(self):
        path = os.path.join(self.tmp.name, "forces.csv")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("step,k,ux,uy,uz\n0,0,1,2,3\n1,1,1,2,3\n")
        with self.assertRaises(InvalidInputError):
            read_forces(path)
