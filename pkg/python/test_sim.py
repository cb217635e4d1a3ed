"""
Simulation Test Suite
=====================

RK4 accuracy, signals, coupled simulations and the randomized property
verifiers, each with a case that must pass and one that must fail.
"""

import math
import unittest

import numpy as np
import scipy.linalg

from balancing import balance, truncate
from error_handler import DimensionError, PreconditionError
from lqgsyn import build_lqg_controller, build_observer
from sim import (ClosedLoopField, Signal, SignalKind, integrate, rk4, signal_from_dict, simulate_closed_loop,
                 simulate_observer, sphere_samples, standard_disturbances, standard_inputs, step_count,
                 verify_error_bound, verify_gain, verify_ges, verify_ies, verify_observability_decay)
from sysmodel import builtin_cubic, linear_plant

A_STABLE = np.array([[-1.0, 0.4, 0.0, 0.0],
                     [-0.4, -2.0, 0.3, 0.0],
                     [0.0, -0.3, -3.0, 0.2],
                     [0.0, 0.0, -0.2, -4.0]])
B_STABLE = np.array([[1.0], [0.5], [0.0], [0.0]])
C_STABLE = np.array([[1.0, 0.0, 0.2, 0.0]])


def lqg_setup(epsilon: float = 0.01):
    plant = linear_plant(A_STABLE, B_STABLE, C_STABLE, epsilon=epsilon)
    P = scipy.linalg.solve_continuous_are(A_STABLE, B_STABLE, C_STABLE.T @ C_STABLE, np.eye(1))
    Q = scipy.linalg.solve_continuous_are(A_STABLE.T, C_STABLE.T, B_STABLE @ B_STABLE.T, np.eye(1))
    return plant, P, Q


class TestIntegrator(unittest.TestCase):
    """Fixed-step RK4"""

    def test_exponential_decay(self):
        """Test x' = -x against exp(-1)"""
        _, states, diverged_at = rk4(lambda x, t: -x, np.array([1.0]), 1.0, 0.01)
        self.assertIsNone(diverged_at)
        self.assertAlmostEqual(float(states[-1, 0]), math.exp(-1.0), places=9)

    def test_fourth_order(self):
        """Test that halving dt divides the error by about 16"""
        errors = []
        for dt in (0.1, 0.05):
            _, states, _ = rk4(lambda x, t: -x, np.array([1.0]), 1.0, dt)
            errors.append(abs(float(states[-1, 0]) - math.exp(-1.0)))
        self.assertGreater(errors[0] / errors[1], 12.0)
        self.assertLess(errors[0] / errors[1], 20.0)

    def test_divergence_detected(self):
        """Test that finite-time blow-up stops the integration"""
        t, states, diverged_at = rk4(lambda x, t: x ** 2, np.array([1.0]), 2.0, 0.01)
        self.assertIsNotNone(diverged_at)
        self.assertLess(diverged_at, 1.1)
        self.assertEqual(len(t), len(states))

    def test_step_count(self):
        """Test grid validation"""
        self.assertEqual(step_count(1.0, 0.001), 1000)
        with self.assertRaises(PreconditionError):
            step_count(1.0, 0.0)
        with self.assertRaises(PreconditionError):
            step_count(0.001, 0.01)

    def test_plant_channels(self):
        """Test input and output channels of a plant simulation"""
        trajectory = integrate(builtin_cubic(), [0.5], Signal.constant([1.0]), T=1.0, dt=0.01)
        np.testing.assert_allclose(trajectory.channel("y")[:, 0], trajectory.states[:, 0])
        np.testing.assert_allclose(trajectory.channel("u"), 1.0)
        self.assertEqual(list(trajectory.to_frame().columns), ["t", "x1", "u1", "y1"])
        with self.assertRaises(DimensionError):
            trajectory.channel("x_hat")

    def test_plant_dimension_checks(self):
        """Test input and initial state dimensions"""
        with self.assertRaises(DimensionError):
            integrate(builtin_cubic(), [0.5, 0.5], T=1.0, dt=0.01)
        with self.assertRaises(DimensionError):
            integrate(builtin_cubic(), [0.5], Signal.zero(2), T=1.0, dt=0.01)


class TestSignals(unittest.TestCase):
    """Input and disturbance signals"""

    def test_sines(self):
        """Test sin t + sin 3t"""
        u = Signal.sines([1.0, 1.0], [1.0, 3.0])
        self.assertAlmostEqual(float(u(0.5)[0]), math.sin(0.5) + math.sin(1.5))

    def test_table_holds_values(self):
        """Test piecewise constant tables"""
        u = Signal.table([0.0, 1.0], [[1.0], [2.0]])
        self.assertEqual(float(u(0.5)[0]), 1.0)
        self.assertEqual(float(u(1.0)[0]), 2.0)
        self.assertEqual(float(u(5.0)[0]), 2.0)
        with self.assertRaises(PreconditionError):
            Signal.table([1.0, 0.5], [[1.0], [2.0]])

    def test_constant_dimension(self):
        """Test that constant values must match the dimension"""
        with self.assertRaises(DimensionError):
            Signal(SignalKind.CONSTANT, 2, (1.0,))

    def test_from_dict_broadcast(self):
        """Test scalar specs broadcast to every channel"""
        u = signal_from_dict({"kind": "constant", "values": [1.0]}, 2)
        np.testing.assert_allclose(u(0.0), [1.0, 1.0])
        same = signal_from_dict(Signal.sines([1.0], [2.0], 3).to_dict(), 3)
        self.assertEqual(same, Signal.sines([1.0], [2.0], 3))

    def test_sphere_samples(self):
        """Test alternating radii"""
        samples = sphere_samples(3, 6, seed=1)
        np.testing.assert_allclose(np.linalg.norm(samples, axis=0), [1.0, 10.0] * 3)


class TestCoupledSimulation(unittest.TestCase):
    """Observer and closed-loop simulations"""

    def setUp(self):
        """Set up a linear plant with an LQG pair"""
        self.plant, self.P, self.Q = lqg_setup()

    def test_observer_error_decays(self):
        """Test that the estimation error vanishes"""
        observer = build_observer(self.plant, self.Q)
        trajectory = simulate_observer(self.plant, observer, [1.0, -1.0, 0.5, 0.0], np.zeros(4),
                                       Signal.sines([1.0, 1.0], [1.0, 3.0]), T=20.0, dt=0.01)
        error = trajectory.channel("error_norm")[:, 0]
        self.assertLess(error[-1], 1e-3 * error[0])

    def test_closed_loop_channels(self):
        """Test channel shapes of a disturbed closed loop"""
        controller = build_lqg_controller(self.plant, self.P, self.Q)
        trajectory = simulate_closed_loop(self.plant, controller, np.ones(4), np.zeros(4),
                                          w_u=Signal.sines([1.0], [1.0]), T=2.0, dt=0.01)
        self.assertEqual(trajectory.channel("x_c").shape, (201, 4))
        self.assertEqual(trajectory.channel("z").shape, (201, 2))
        self.assertEqual(trajectory.channel("w").shape, (201, 2))
        np.testing.assert_allclose(trajectory.channel("u"), -trajectory.channel("x_c") @ controller.K_c.T)

    def test_closed_loop_field_follows_time(self):
        """Test that integrating the loop field applies the disturbance at every step"""
        controller = build_lqg_controller(self.plant, self.P, self.Q)
        w_u = Signal.sines([1.0], [1.0])
        loop = ClosedLoopField(self.plant, controller, w_u=w_u)
        z0 = np.concatenate([np.ones(4), np.zeros(4)])
        trajectory = integrate(loop, z0, T=2.0, dt=0.01)
        reference = simulate_closed_loop(self.plant, controller, np.ones(4), np.zeros(4), w_u=w_u, T=2.0, dt=0.01)
        np.testing.assert_allclose(trajectory.states[:, :4], reference.states, atol=1e-12)
        np.testing.assert_allclose(trajectory.states[:, 4:], reference.channel("x_c"), atol=1e-12)
        # sin(0) = 0, so a loop frozen at t = 0 would be the undisturbed one
        undisturbed = integrate(ClosedLoopField(self.plant, controller), z0, T=2.0, dt=0.01)
        self.assertGreater(np.max(np.abs(trajectory.states - undisturbed.states)), 1e-3)

    def test_closed_loop_jacobian(self):
        """Test the block Jacobian against the closed-loop matrix and central differences"""
        controller = build_lqg_controller(self.plant, self.P, self.Q)
        loop = ClosedLoopField(self.plant, controller, w_u=Signal.constant([0.5]))
        expected = np.block([[A_STABLE, -B_STABLE @ controller.K_c],
                             [controller.L_c @ C_STABLE, A_STABLE + controller.A_c]])
        z = np.linspace(-1.0, 1.0, 8)
        J = loop.jacobian_at(z)
        np.testing.assert_allclose(J, expected, atol=1e-12)
        h = 1e-6
        numeric = np.column_stack([(loop.evaluate(z + h * e) - loop.evaluate(z - h * e)) / (2 * h)
                                   for e in np.eye(8)])
        np.testing.assert_allclose(J, numeric, atol=1e-6)
        batch = loop.jacobian_at(np.zeros((8, 3)))
        self.assertEqual(batch.shape, (8, 8, 3))
        np.testing.assert_allclose(batch[:, :, 2], expected, atol=1e-12)

    def test_closed_loop_dimension_checks(self):
        """Test disturbance and initial state dimensions"""
        controller = build_lqg_controller(self.plant, self.P, self.Q)
        with self.assertRaises(DimensionError):
            ClosedLoopField(self.plant, controller, w_u=Signal.zero(2))
        with self.assertRaises(DimensionError):
            simulate_closed_loop(self.plant, controller, np.ones(4), np.zeros(3), T=1.0, dt=0.01)


class TestVerifiers(unittest.TestCase):
    """Randomized checks of certified properties"""

    def test_ies_holds(self):
        """Test incremental stability of the cubic with X = 1, eps = 0.1"""
        report = verify_ies(builtin_cubic(), np.eye(1), 0.1, trials=12, T=2.0, dt=1e-3)
        self.assertTrue(report.passed)
        self.assertLessEqual(report.metrics["worst_ratio"], 1.0)

    def test_ies_rejects_overclaimed_rate(self):
        """Test that a decay rate the system does not have is caught"""
        report = verify_ies(builtin_cubic(), np.eye(1), 5.0, trials=12, T=2.0, dt=1e-3)
        self.assertFalse(report.passed)
        self.assertTrue(report.failures)

    def test_observability_decay(self):
        """Test the output energy bound with Y = 1 and its failure with Y = 0.1"""
        plant = builtin_cubic()
        self.assertTrue(verify_observability_decay(plant, np.eye(1), 0.1, trials=8, T=5.0, dt=1e-3).passed)
        self.assertFalse(verify_observability_decay(plant, 0.1 * np.eye(1), 0.1, trials=8, T=5.0, dt=1e-3).passed)

    def test_error_bound_linear(self):
        """Test the balanced truncation bound on a linear plant"""
        plant = linear_plant(A_STABLE, B_STABLE, C_STABLE)
        Wc = scipy.linalg.solve_continuous_lyapunov(A_STABLE, -B_STABLE @ B_STABLE.T)
        Wo = scipy.linalg.solve_continuous_lyapunov(A_STABLE.T, -C_STABLE.T @ C_STABLE)
        balanced = balance(plant, None, Wc, Wo)
        reduced = truncate(balanced, 2)
        report = verify_error_bound(plant, reduced.plant, balanced.sigma, 2, standard_inputs(1), T=10.0, dt=0.01)
        self.assertTrue(report.passed)
        self.assertLessEqual(report.metrics["input2_error"], report.metrics["input2_bound"] * (1 + 1e-3))

    def test_error_bound_skipped_for_even_terms(self):
        """Test that a non-odd field skips the bound check"""
        plant = builtin_cubic(odd=False)
        report = verify_error_bound(plant, plant, [1.0], 1, standard_inputs(1), T=1.0, dt=0.01)
        self.assertEqual(report.status, "skipped")

    def test_ges(self):
        """Test GES of an LQG loop and failure for an unstable field"""
        plant, P, Q = lqg_setup()
        loop = ClosedLoopField(plant, build_lqg_controller(plant, P, Q))
        self.assertTrue(verify_ges(loop, trials=4, T=20.0, dt=0.01).passed)
        unstable = linear_plant([[1.0]], [[1.0]], [[1.0]])
        report = verify_ges(unstable, trials=4, T=25.0, dt=0.01)
        self.assertFalse(report.passed)

    def test_gain(self):
        """Test the L2 gain check against a loose and an impossible claim"""
        plant, P, Q = lqg_setup()
        controller = build_lqg_controller(plant, P, Q)
        disturbances = standard_disturbances(plant)
        loose = verify_gain(plant, controller, 1e3, disturbances, T=10.0, dt=0.01)
        self.assertTrue(loose.passed)
        self.assertGreater(loose.metrics["observed_gain"], 0.0)
        self.assertFalse(verify_gain(plant, controller, 1e-4, disturbances, T=10.0, dt=0.01).passed)


def run_sim_tests() -> bool:
    suite = unittest.TestSuite()
    for test_class in [TestIntegrator, TestSignals, TestCoupledSimulation, TestVerifiers]:
        suite.addTests(unittest.TestLoader().loadTestsFromTestCase(test_class))
    return unittest.TextTestRunner(verbosity=2).run(suite).wasSuccessful()


if __name__ == "__main__":
    unittest.main(verbosity=2)
