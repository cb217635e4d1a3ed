"""
H-infinity Balancing Test Suite
===============================

Certificates on the DC motor with externally supplied Riccati solutions,
order selection, gain bounds, reduced controllers, gamma improvement and
a fully solved linear design.
"""

import math
import unittest

import numpy as np

from error_handler import PreconditionError
from hinfsyn import (beta_of, certify, gain_bound, hinf_balance, hinf_closure_report, hinf_design,
                     hinf_rcr_gramians, hinf_rcr_report, improve_gamma, recertify, reduce_controller, rho,
                     select_order, synthesize_controller)
from lmi import lambda_max, sym
from lqgsyn import ControllerKind
from sysmodel import build_vertices, builtin_dc_motor, linear_plant

P_INF = np.array([[3.20, 0.888, 0.163], [0.888, 0.477, 0.0778], [0.163, 0.0778, 0.0154]])
Q_INF = np.array([[0.993, -0.0848, 0.104], [-0.0848, 0.338, 0.0737], [0.104, 0.0737, 2.43]])
PI_REFERENCE = [1.78, 0.400, 0.192]
GAMMA = math.sqrt(2.0)


class TestScalarFormulas(unittest.TestCase):
    """beta, rho_r, order selection and the gain bound"""

    def test_beta(self):
        """Test beta = sqrt(1 - gamma^-2) and its domain"""
        self.assertAlmostEqual(beta_of(GAMMA), 1 / math.sqrt(2.0))
        for gamma in (1.0, 0.5, math.inf):
            with self.assertRaises(PreconditionError):
                beta_of(gamma)

    def test_rho(self):
        """Test the weighted tail sums"""
        beta = beta_of(GAMMA)
        factor = 1 + GAMMA / beta
        self.assertAlmostEqual(factor, 3.0)
        self.assertAlmostEqual(rho(PI_REFERENCE, 2, beta), 0.269, delta=0.002)
        self.assertAlmostEqual(rho(PI_REFERENCE, 2, beta) * factor, 0.807, delta=0.02)
        self.assertAlmostEqual(rho(PI_REFERENCE, 1, beta) * factor, 2.44, delta=0.02)
        self.assertEqual(rho(PI_REFERENCE, 3, beta), 0.0)
        with self.assertRaises(PreconditionError):
            rho(PI_REFERENCE, 4, beta)

    def test_select_order(self):
        """Test that r = 2 is the smallest order passing the condition"""
        self.assertEqual(select_order(PI_REFERENCE, GAMMA), (2, True))
        self.assertEqual(select_order([5.0, 4.0, 3.0], GAMMA), (3, False))

    def test_gain_bound(self):
        """Test the closed-loop gain bound and where it is undefined"""
        beta = beta_of(GAMMA)
        self.assertAlmostEqual(gain_bound(GAMMA, 0.0), GAMMA / beta)
        rho_2 = rho(PI_REFERENCE, 2, beta)
        expected = (beta * GAMMA + rho_2 * (GAMMA + beta)) / (beta * (beta - rho_2 * (GAMMA + beta)))
        self.assertAlmostEqual(gain_bound(GAMMA, rho_2), expected)
        self.assertGreater(gain_bound(GAMMA, rho_2), GAMMA)
        self.assertIsNone(gain_bound(GAMMA, rho(PI_REFERENCE, 1, beta)))


class TestInjectedCertificate(unittest.TestCase):
    """DC motor with the published P_inf and Q_inf"""

    @classmethod
    def setUpClass(cls):
        """Check the supplied matrices once"""
        cls.plant = builtin_dc_motor()
        cls.vertices = build_vertices(cls.plant)
        cls.cert = certify(cls.plant, cls.vertices, GAMMA, P_INF, Q_INF)

    def test_balanced_values(self):
        """Test pi against the published values within 1%"""
        for value, reference in zip(self.cert.pi, PI_REFERENCE):
            self.assertAlmostEqual(value / reference, 1.0, delta=0.01)

    def test_spectral_condition_reported(self):
        """Test that lambda_max(P Q) > gamma^2 is flagged"""
        self.assertAlmostEqual(self.cert.lambda_max, 3.17, delta=0.05)
        self.assertAlmostEqual(self.cert.lambda_max, self.cert.pi[0] ** 2, places=8)
        self.assertFalse(self.cert.spectral_ok)
        self.assertTrue(self.cert.injected)
        self.assertTrue(any("spectral condition unmet" in note for note in self.cert.notes))

    def test_rinf_bounds_every_vertex(self):
        """Test R_inf >= 0 and R_inf + M_i(P) >= 0"""
        self.assertLessEqual(self.cert.report.violations["R_inf >= 0"], 1e-9)
        for i in range(len(self.vertices)):
            self.assertLessEqual(self.cert.report.violations[f"R_inf bound[{i}]"], 1e-9)

    def test_rcr_gramians(self):
        """Test the H-inf RCR Gramians against P_inf and Q_inf"""
        X, Y = hinf_rcr_gramians(P_INF, Q_INF, GAMMA)
        beta2 = self.cert.beta ** 2
        np.testing.assert_allclose(Y, beta2 * P_INF, rtol=1e-12)
        np.testing.assert_allclose(np.linalg.inv(X), beta2 * P_INF + np.linalg.inv(Q_INF), rtol=1e-9, atol=1e-9)
        self.assertGreater(np.linalg.eigvalsh(X)[0], 0.0)
        # eig(X Y) = beta^2 pi^2 / (1 + beta^2 pi^2)
        pi = np.asarray(self.cert.pi)
        expected = np.sort(beta2 * pi ** 2 / (1.0 + beta2 * pi ** 2))
        np.testing.assert_allclose(np.sort(np.linalg.eigvals(X @ Y).real), expected, rtol=1e-8)

    def test_controller_needs_override(self):
        """Test that the spectral failure blocks synthesis unless overridden"""
        with self.assertRaises(PreconditionError):
            synthesize_controller(self.plant, self.cert)
        controller = synthesize_controller(self.plant, self.cert, override=True)
        self.assertFalse(controller.certified)
        self.assertTrue(any("override" in note for note in controller.notes))
        np.testing.assert_allclose(controller.K_c, self.plant.B.T @ P_INF)

    def test_reduced_controllers(self):
        """Test the order-2 and order-1 reduced controllers"""
        controller, report = reduce_controller(self.plant, self.cert, 2)
        self.assertEqual(controller.order, 2)
        self.assertEqual(controller.kind, ControllerKind.HINF_REDUCED)
        self.assertFalse(report.items["I"])
        self.assertTrue(report.items["II"])
        self.assertTrue(report.items["III"])
        self.assertTrue(report.items["IV"])
        self.assertIsNotNone(report.gain_bound)
        self.assertFalse(report.ges_certified)
        _, report_1 = reduce_controller(self.plant, self.cert, 1)
        self.assertFalse(report_1.items["IV"])
        self.assertIsNone(report_1.gain_bound)

    def test_reduced_observer_gain(self):
        """Test L = (Pi1^-1 - gamma^-2 Pi1)^-1 C1^T"""
        controller, _ = reduce_controller(self.plant, self.cert, 2)
        pi1 = self.cert.pi[:2]
        S1 = 1 / pi1 - pi1 / GAMMA ** 2
        C1 = (self.plant.C @ np.linalg.inv(controller.T))[:, :2]
        np.testing.assert_allclose(controller.L_c, np.diag(1 / S1) @ C1.T, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(controller.K_c, (controller.T @ self.plant.B)[:2].T @ np.diag(pi1),
                                   rtol=1e-8, atol=1e-12)
        self.assertTrue(any("indefinite" in note for note in controller.notes))

    def test_design_with_override(self):
        """Test the full design path on the published matrices"""
        design = hinf_design(self.plant, self.vertices, GAMMA, orders=[1, 2], P=P_INF, Q=Q_INF,
                             override=True, improve=True)
        self.assertEqual((design.order, design.order_found), (2, True))
        self.assertEqual(sorted(design.reduced), [1, 2])
        self.assertIsNotNone(design.improvement)
        self.assertIn("rho_table", design.to_dict())


class TestGammaImprovement(unittest.TestCase):
    """Closed-form alpha and gamma_bar"""

    def setUp(self):
        """Set up the injected DC motor certificate"""
        plant = builtin_dc_motor()
        self.plant = plant
        self.cert = certify(plant, build_vertices(plant), GAMMA, P_INF, Q_INF)

    def test_alpha_constraints(self):
        """Test that alpha* satisfies every constraint it is maximized under"""
        result = improve_gamma(self.cert, self.plant)
        P, Q, B, C = self.cert.P, self.cert.Q, self.plant.B, self.plant.C
        self.assertGreater(result.alpha, 0.0)
        self.assertLessEqual(result.alpha, self.cert.beta ** 2)
        self.assertLessEqual(2 * result.eps2, self.cert.epsilon)
        self.assertLessEqual(lambda_max(sym(result.alpha * P @ B @ B.T @ P - result.eps2 * P)), 1e-9)
        self.assertLessEqual(lambda_max(sym(result.alpha * Q @ C.T @ C @ Q - result.eps2 * Q)), 1e-9)

    def test_gamma_bar(self):
        """Test gamma_bar = gamma / sqrt(1 + alpha gamma^2) < gamma"""
        result = improve_gamma(self.cert, self.plant)
        self.assertAlmostEqual(result.gamma_bar, GAMMA / math.sqrt(1 + result.alpha * GAMMA ** 2))
        self.assertLess(result.gamma_bar, GAMMA)

    def test_needs_contraction(self):
        """Test that eps = 0 leaves nothing to improve"""
        plant = builtin_dc_motor(epsilon=0.0)
        cert = certify(plant, build_vertices(plant), GAMMA, P_INF, Q_INF)
        with self.assertRaises(PreconditionError):
            improve_gamma(cert, plant)


class TestSolvedLinearDesign(unittest.TestCase):
    """Fully solved certificate for a stable linear plant at a loose gamma"""

    @classmethod
    def setUpClass(cls):
        """Solve the certificate once"""
        cls.A = np.array([[-1.0, 0.4, 0.0], [-0.4, -2.0, 0.3], [0.0, -0.3, -3.0]])
        cls.B = np.array([[1.0], [0.5], [0.0]])
        cls.C = np.array([[1.0, 0.0, 0.2]])
        cls.plant = linear_plant(cls.A, cls.B, cls.C, epsilon=0.01)
        cls.vertices = build_vertices(cls.plant)
        cls.gamma = 10.0
        cls.design = hinf_design(cls.plant, cls.vertices, cls.gamma)

    def test_certificate(self):
        """Test feasibility and the spectral condition"""
        cert = self.design.cert
        self.assertTrue(cert.p_feasible)
        self.assertTrue(cert.q_feasible)
        self.assertTrue(cert.spectral_ok)
        self.assertFalse(cert.injected)

    def test_controller_certified(self):
        """Test that the full controller is certified and stabilizes the loop"""
        controller = self.design.controller
        self.assertTrue(controller.certified)
        closed = np.block([[self.A, -self.B @ controller.K_c],
                           [controller.L_c @ self.C, self.A + controller.A_c]])
        self.assertLess(np.max(np.linalg.eigvals(closed).real), 0.0)

    def test_pi_descending(self):
        """Test the H-inf singular values"""
        pi = self.design.cert.pi
        self.assertTrue(np.all(np.diff(pi) <= 0))
        self.assertTrue(np.all(pi > 0))

    def test_rcr_report(self):
        """Test that the H-inf RCR observability inequalities hold with Y = beta^2 P_inf"""
        report = hinf_rcr_report(self.plant, self.vertices, self.design.cert)
        scale = max(1.0, float(np.linalg.norm(self.design.cert.P, 2)) ** 2)
        self.assertLessEqual(report.violations["Y > 0"], 0.0)
        for i in range(len(self.vertices)):
            self.assertLessEqual(report.violations[f"observability[{i}]"], 1e-6 * scale)

    def test_recertify_at_gamma_bar(self):
        """Test that the improved gamma is certified again and lower values are refused"""
        improvement = improve_gamma(self.design.cert, self.plant)
        self.assertLess(improvement.gamma_bar, self.gamma)
        cert = recertify(self.plant, self.vertices, improvement)
        self.assertAlmostEqual(cert.gamma, improvement.gamma_bar)
        self.assertTrue(cert.p_feasible)
        self.assertTrue(cert.q_feasible)
        with self.assertRaises(PreconditionError) as ctx:
            recertify(self.plant, self.vertices, improvement, gamma=0.9 * improvement.gamma_bar)
        self.assertEqual(ctx.exception.stage, "recertify")

    def test_truncated_certificate(self):
        """Test that Pi_1 meets the truncated inequalities"""
        balanced = hinf_balance(self.plant, self.design.cert)
        report = hinf_closure_report(balanced, self.design.cert, 2)
        self.assertLessEqual(report.worst, 1e-6 * max(1.0, float(balanced.sigma[0]) ** 2))


def run_hinfsyn_tests() -> bool:
    suite = unittest.TestSuite()
    for test_class in [TestScalarFormulas, TestInjectedCertificate, TestGammaImprovement, TestSolvedLinearDesign]:
        suite.addTests(unittest.TestLoader().loadTestsFromTestCase(test_class))
    return unittest.TextTestRunner(verbosity=2).run(suite).wasSuccessful()


if __name__ == "__main__":
    unittest.main(verbosity=2)
