import math

import numpy as np
import torch
from django.test import SimpleTestCase, tag

from geometry.exceptions import InvalidArgumentError, NumericalFailureError
from geometry.kernels import kernel_eval, kernel_grad1, rkhs_norm_sq, velocity_at
from geometry.optim import OptimConfig, StopReason, evaluate, grad_flow_objective, gradient_descent
from geometry.shooting import flow, hamiltonian_energy, hamiltonian_rhs, shoot
from geometry.types import (
    ControlSystem,
    ForceField,
    IntegratorConfig,
    KernelParams,
    LandmarkSet,
    Scheme,
    as_tensor,
    to_numpy,
)


def random_system(rng, n_points=10, box=60.0, max_norm=15.0):
    control_points = rng.uniform(0.0, box, size=(n_points, 3))
    directions = rng.normal(size=(n_points, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    momenta = directions * rng.uniform(0.0, max_norm, size=(n_points, 1))
    return ControlSystem(control_points, momenta)


class _UnstableBeyond(torch.autograd.Function):
    """(x - 4)^2 summed; finite everywhere, with a NaN gradient for |x| > 3.5."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return ((x - 4.0) ** 2).sum()

    @staticmethod
    def backward(ctx, grad_output):
        (x,) = ctx.saved_tensors
        grad = 2.0 * (x - 4.0) * grad_output
        return torch.where(x.abs() > 3.5, torch.full_like(x, float("nan")), grad)


### Equivalence classes ###
##  Types
#       sigma > 0                       (valid)
#       sigma <= 0                      (invalid)
#       n_steps >= 1                    (valid)
#       n_steps = 0                     (invalid)
#       momenta / control point mismatch (invalid)

class TypeValidationTests(SimpleTestCase):
    def test_kernel_sigma_must_be_positive(self):
        with self.assertRaises(InvalidArgumentError):
            KernelParams(0.0)
        with self.assertRaises(InvalidArgumentError):
            KernelParams(-1.0)

    def test_integrator_needs_steps(self):
        with self.assertRaises(InvalidArgumentError):
            IntegratorConfig(n_steps=0)
        self.assertEqual(IntegratorConfig(n_steps=4, scheme="euler").scheme, Scheme.EULER)

    def test_control_system_shapes(self):
        with self.assertRaises(InvalidArgumentError):
            ControlSystem(np.zeros((3, 3)), np.zeros((2, 3)))

    def test_landmarks_must_be_finite(self):
        with self.assertRaises(InvalidArgumentError):
            LandmarkSet([[0.0, np.nan, 0.0]])


class KernelTests(SimpleTestCase):
    """Gaussian kernel, its gradient, velocity fields and RKHS norms."""

    def setUp(self):
        self.kernel = KernelParams(15.0)
        self.rng = np.random.default_rng(0)

    def test_kernel_values(self):
        x = np.array([1.0, 2.0, 3.0])
        self.assertEqual(kernel_eval(x, x, self.kernel), 1.0)
        self.assertAlmostEqual(kernel_eval(x, x + [15.0, 0, 0], self.kernel), math.exp(-1.0), places=12)
        self.assertAlmostEqual(kernel_eval(x, x + [0, 30.0, 0], self.kernel), math.exp(-4.0), places=12)

    def test_kernel_is_symmetric(self):
        for _ in range(20):
            x, y = self.rng.normal(scale=20.0, size=(2, 3))
            self.assertEqual(kernel_eval(x, y, self.kernel), kernel_eval(y, x, self.kernel))

    def test_gradient_closed_form(self):
        x = np.zeros(3)
        np.testing.assert_array_equal(kernel_grad1(x, x, self.kernel), np.zeros(3))
        sigma = self.kernel.sigma
        grad = kernel_grad1([sigma, 0, 0], x, self.kernel)
        np.testing.assert_allclose(grad, [-2.0 / sigma * math.exp(-1.0), 0, 0], rtol=1e-12)

    def test_gradient_matches_finite_differences(self):
        h = 1e-4 * self.kernel.sigma
        for _ in range(20):
            x, y = self.rng.normal(scale=10.0, size=(2, 3))
            numeric = np.array([
                (kernel_eval(x + h * e, y, self.kernel) - kernel_eval(x - h * e, y, self.kernel)) / (2 * h)
                for e in np.eye(3)
            ])
            analytic = kernel_grad1(x, y, self.kernel)
            np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-12)

    def test_velocity_field(self):
        c = np.array([[0.0, 0.0, 0.0]])
        np.testing.assert_allclose(velocity_at(c[0], ControlSystem(c, [[1.0, 0, 0]]), self.kernel), [1.0, 0, 0])
        np.testing.assert_array_equal(velocity_at(c[0], ControlSystem.at_rest(c), self.kernel), np.zeros(3))

        # Two control points, equal momenta, query point at distance sigma from both
        sigma = self.kernel.sigma
        half = sigma / 2.0
        points = [[-half, 0, 0], [half, 0, 0]]
        x = [0.0, math.sqrt(sigma ** 2 - half ** 2), 0.0]
        mu = np.array([1.0, 2.0, -1.0])
        value = velocity_at(x, ControlSystem(points, [mu, mu]), self.kernel)
        np.testing.assert_allclose(value, 2 * math.exp(-1.0) * mu, rtol=1e-12)

    def test_rkhs_norm(self):
        self.assertAlmostEqual(rkhs_norm_sq(ControlSystem([[0, 0, 0]], [[1.0, 2.0, 3.0]]), self.kernel), 14.0)
        self.assertEqual(rkhs_norm_sq(ControlSystem.at_rest(np.eye(3)), self.kernel), 0.0)
        two = ControlSystem([[0, 0, 0], [15.0, 0, 0]], [[1.0, 0, 0], [1.0, 0, 0]])
        self.assertAlmostEqual(rkhs_norm_sq(two, self.kernel), 2 + 2 * math.exp(-1.0), places=12)

    def test_rkhs_norm_positive_and_quadratic(self):
        for _ in range(20):
            system = random_system(self.rng, n_points=6)
            norm = rkhs_norm_sq(system, self.kernel)
            self.assertGreater(norm, 0.0)
            scaled = rkhs_norm_sq(system.with_momenta(3.0 * system.momenta), self.kernel)
            self.assertAlmostEqual(scaled / norm, 9.0, places=10)


class ShootingTests(SimpleTestCase):
    """Hamiltonian right-hand side and shooting of control points and landmarks."""

    def setUp(self):
        self.kernel = KernelParams(15.0)
        self.rng = np.random.default_rng(1)

    def test_rhs_single_point(self):
        dc, dmu = hamiltonian_rhs(ControlSystem([[1.0, 2.0, 3.0]], [[1.0, 0, 0]]), self.kernel)
        np.testing.assert_allclose(dc, [[1.0, 0, 0]])
        np.testing.assert_allclose(dmu, [[0.0, 0, 0]])

    def test_rhs_with_forces(self):
        system = ControlSystem.at_rest(self.rng.normal(size=(4, 3)))
        forces = self.rng.normal(size=(4, 3))
        dc, dmu = hamiltonian_rhs(system, self.kernel, forces)
        np.testing.assert_array_equal(dc, np.zeros((4, 3)))
        np.testing.assert_allclose(dmu, forces)
        with self.assertRaises(InvalidArgumentError):
            hamiltonian_rhs(system, self.kernel, np.zeros((3, 3)))

    def test_identity_flow(self):
        system = ControlSystem.at_rest(self.rng.normal(scale=10.0, size=(5, 3)))
        carried = LandmarkSet(self.rng.normal(scale=10.0, size=(7, 3)))
        result = shoot(system, carried, self.kernel, IntegratorConfig(8))
        self.assertEqual(len(result.states), 9)
        for c, mu, x in result.states:
            np.testing.assert_array_equal(c, system.control_points)
            np.testing.assert_array_equal(mu, system.momenta)
            np.testing.assert_array_equal(x, carried.points)

    def test_single_point_straight_line(self):
        c0 = np.array([[2.0, -1.0, 0.5]])
        system = ControlSystem(c0, [[1.0, 0, 0]])
        result = shoot(system, LandmarkSet(c0), self.kernel, IntegratorConfig(10))
        for (c, mu, x), t in zip(result.states, result.times):
            np.testing.assert_allclose(c, c0 + [[t, 0, 0]], atol=1e-12)
            np.testing.assert_allclose(mu, [[1.0, 0, 0]], atol=1e-12)
            np.testing.assert_allclose(x, c0 + [[t, 0, 0]], atol=1e-12)

    def test_first_state_is_initial_state(self):
        system = random_system(self.rng, 4)
        carried = LandmarkSet(self.rng.uniform(0, 60, size=(6, 3)))
        c, mu, x = shoot(system, carried, self.kernel).states[0]
        np.testing.assert_array_equal(c, system.control_points)
        np.testing.assert_array_equal(mu, system.momenta)
        np.testing.assert_array_equal(x, carried.points)

    def test_far_apart_points_superpose(self):
        sigma = self.kernel.sigma
        points = np.array([[0.0, 0, 0], [10 * sigma, 0, 0]])
        system = ControlSystem(points, [[1.0, 0, 0], [1.0, 0, 0]])
        result = shoot(system, LandmarkSet(points), self.kernel, IntegratorConfig(20))
        reference = shoot(system, LandmarkSet(points), self.kernel, IntegratorConfig(2000))
        np.testing.assert_allclose(to_numpy(result.final_landmarks()), points + [[1.0, 0, 0]], atol=1e-8)
        np.testing.assert_allclose(
            to_numpy(result.final_landmarks()), to_numpy(reference.final_landmarks()), atol=1e-8
        )

    def test_hamiltonian_energy(self):
        self.assertEqual(hamiltonian_energy(ControlSystem.at_rest([[0, 0, 0]]), self.kernel), 0.0)
        self.assertAlmostEqual(hamiltonian_energy(ControlSystem([[0, 0, 0]], [[2.0, 0, 0]]), self.kernel), 4.0)

    def test_energy_is_conserved_along_geodesics(self):
        """RK4 with 20 steps keeps the kinetic energy constant to 1e-6 relative."""
        carried = LandmarkSet(np.zeros((1, 3)))
        for _ in range(100):
            system = random_system(self.rng, 10, box=4 * self.kernel.sigma, max_norm=self.kernel.sigma)
            energies = shoot(system, carried, self.kernel, IntegratorConfig(20)).energies(self.kernel)
            drift = np.max(np.abs(energies - energies[0])) / energies[0]
            self.assertLessEqual(drift, 1e-6)

    def test_zero_forces_reduce_to_geodesic(self):
        system = random_system(self.rng, 6)
        carried = LandmarkSet(self.rng.uniform(0, 60, size=(5, 3)))
        integrator = IntegratorConfig(10)
        geodesic = shoot(system, carried, self.kernel, integrator)
        forced = shoot(system, carried, self.kernel, integrator, ForceField.zeros(10, 6))
        for field in ("control_points", "momenta", "landmarks"):
            self.assertTrue(torch.equal(getattr(geodesic, field), getattr(forced, field)))

    def test_shooting_is_deterministic(self):
        system = random_system(self.rng, 6)
        carried = LandmarkSet(self.rng.uniform(0, 60, size=(5, 3)))
        forces = ForceField(self.rng.normal(size=(10, 6, 3)))
        first = shoot(system, carried, self.kernel, IntegratorConfig(10), forces)
        second = shoot(system, carried, self.kernel, IntegratorConfig(10), forces)
        self.assertTrue(torch.equal(first.landmarks, second.landmarks))

    def test_force_grid_must_match(self):
        system = random_system(self.rng, 3)
        with self.assertRaises(InvalidArgumentError):
            shoot(system, LandmarkSet([[0, 0, 0]]), self.kernel, IntegratorConfig(10), ForceField.zeros(5, 3))

    @tag("slow")
    def test_convergence_orders(self):
        """Endpoint error against a fine reference decays at order 1 (Euler) and 4 (RK4)."""
        system = ControlSystem(
            [[0.0, 0.0, 0.0], [12.0, 3.0, 0.0], [4.0, 11.0, 5.0]],
            [[6.0, 2.0, 0.0], [-3.0, 5.0, 1.0], [1.0, -4.0, 3.0]],
        )
        carried = LandmarkSet(system.control_points)

        def endpoint(n, scheme):
            return to_numpy(shoot(system, carried, self.kernel, IntegratorConfig(n, scheme)).final_landmarks())

        reference = endpoint(4096, Scheme.RK4)
        for scheme, expected, (coarse, fine) in ((Scheme.EULER, 0.9, (128, 256)), (Scheme.RK4, 3.5, (16, 32))):
            error_coarse = np.abs(endpoint(coarse, scheme) - reference).max()
            error_fine = np.abs(endpoint(fine, scheme) - reference).max()
            order = math.log2(error_coarse / error_fine)
            self.assertGreaterEqual(order, expected, msg=scheme)


class GradientTests(SimpleTestCase):
    """Reverse-mode gradients through the integrator and the descent driver."""

    def setUp(self):
        self.kernel = KernelParams(15.0)
        self.integrator = IntegratorConfig(10)
        self.rng = np.random.default_rng(2)

    def test_zero_gradient_at_identity(self):
        c = np.array([[1.0, 1.0, 1.0]])

        def objective(result):
            return ((result.final_landmarks() - as_tensor(c)) ** 2).sum()

        grad = grad_flow_objective(objective, np.zeros((1, 3)), c, c, self.kernel, self.integrator)
        self.assertEqual(grad.cost, 0.0)
        np.testing.assert_array_equal(grad.grad_momenta, np.zeros((1, 3)))

    def test_gradient_of_initial_energy(self):
        system = random_system(self.rng, 5)

        def objective(result):
            c, mu = result.control_points[0], result.momenta[0]
            diffs = ((c[:, None, :] - c[None, :, :]) ** 2).sum(-1)
            return (torch.exp(-diffs / self.kernel.sigma ** 2) * (mu @ mu.T)).sum()

        grad = grad_flow_objective(
            objective, system.momenta, system.control_points, np.zeros((1, 3)), self.kernel, self.integrator
        )
        c = system.control_points
        gram_matrix = np.exp(-((c[:, None] - c[None]) ** 2).sum(-1) / self.kernel.sigma ** 2)
        np.testing.assert_allclose(grad.grad_momenta, 2 * gram_matrix @ system.momenta, rtol=1e-12)

    def _finite_difference_check(self, trials, with_forces):
        for _ in range(trials):
            system = random_system(self.rng, 10, box=40.0, max_norm=5.0)
            carried = self.rng.uniform(0, 40, size=(12, 3))
            target = carried + self.rng.normal(scale=2.0, size=carried.shape)
            forces = self.rng.normal(scale=2.0, size=(10, 10, 3)) if with_forces else None

            def objective(result):
                data = ((result.landmarks[-1] - as_tensor(target)) ** 2).sum()
                middle = ((result.landmarks[5] - as_tensor(target)) ** 2).sum()
                return data + 0.5 * middle

            grad = grad_flow_objective(
                objective, system.momenta, system.control_points, carried, self.kernel, self.integrator, forces
            )
            blocks = [("momenta", system.momenta, grad.grad_momenta)]
            if with_forces:
                blocks.append(("forces", forces, grad.grad_forces))
            for name, value, analytic in blocks:
                h = 1e-5 * max(1.0, np.abs(value).max())
                flat = value.reshape(-1)
                for index in self.rng.choice(flat.size, size=5, replace=False):
                    plus, minus = flat.copy(), flat.copy()
                    plus[index] += h
                    minus[index] -= h

                    def cost_with(values):
                        params = {"momenta": system.momenta, "forces": forces}
                        params[name] = values.reshape(value.shape)
                        result = flow(system.control_points, params["momenta"], carried,
                                      self.kernel, self.integrator, params["forces"])
                        return float(objective(result))

                    numeric = (cost_with(plus) - cost_with(minus)) / (2 * h)
                    exact = analytic.reshape(-1)[index]
                    scale = max(abs(numeric), abs(exact), 1e-3 * np.abs(analytic).max())
                    self.assertLessEqual(abs(numeric - exact) / scale, 1e-4)

    def test_momentum_gradient_matches_finite_differences(self):
        self._finite_difference_check(trials=10, with_forces=False)

    @tag("slow")
    def test_gradients_match_finite_differences_randomized(self):
        self._finite_difference_check(trials=100, with_forces=True)

    def test_non_finite_cost_is_reported(self):
        def objective(result):
            return result.final_landmarks().sum() * float("inf")

        with self.assertRaises(NumericalFailureError):
            grad_flow_objective(objective, np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)),
                                self.kernel, self.integrator)

    def test_descent_on_quadratic(self):
        result = gradient_descent(lambda p: ((p["x"] - 3.0) ** 2).sum(), {"x": np.array([0.0])},
                                  OptimConfig(max_iters=100))
        self.assertLessEqual(abs(result.params["x"][0] - 3.0), 1e-6)
        self.assertLessEqual(result.iterations, 100)
        self.assertTrue(all(b <= a for a, b in zip(result.trace, result.trace[1:])))

    def test_non_finite_gradient_shrinks_the_step(self):
        result = gradient_descent(lambda p: _UnstableBeyond.apply(p["x"]), {"x": np.array([0.0])},
                                  OptimConfig(max_iters=20))
        self.assertEqual(result.status, StopReason.STAGNATION)
        self.assertEqual(result.params["x"][0], 3.5)
        self.assertEqual(result.cost, 0.25)
        self.assertTrue(all(b <= a for a, b in zip(result.trace, result.trace[1:])))

    def test_descent_stops_at_stationary_point(self):
        start = {"x": np.array([3.0, -1.0])}
        result = gradient_descent(lambda p: ((p["x"] - as_tensor([3.0, -1.0])) ** 2).sum(), start)
        self.assertEqual(result.iterations, 0)
        self.assertEqual(result.status, StopReason.GRADIENT)
        np.testing.assert_array_equal(result.params["x"], start["x"])

    def test_descent_is_deterministic(self):
        def objective(p):
            return (torch.cos(p["x"]) + 0.1 * p["x"] ** 2).sum()

        start = {"x": self.rng.normal(size=5)}
        first = gradient_descent(objective, start, OptimConfig(max_iters=30))
        second = gradient_descent(objective, start, OptimConfig(max_iters=30))
        self.assertEqual(first.trace, second.trace)

    def test_evaluate_without_gradient(self):
        cost, grads = evaluate(lambda p: (p["x"] ** 2).sum(), {"x": np.array([1.0, 2.0])}, with_grad=False)
        self.assertEqual(cost, 5.0)
        self.assertIsNone(grads)

    def test_optim_config_validation(self):
        with self.assertRaises(InvalidArgumentError):
            OptimConfig(backtracking=1.0)
        with self.assertRaises(InvalidArgumentError):
            OptimConfig(initial_step=0.0)
