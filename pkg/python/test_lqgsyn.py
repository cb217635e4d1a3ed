"""
LQG Balancing Test Suite
========================

GD Riccati inequalities against CARE oracles, coprime representation
Gramians, observer and controller construction, LQG balanced truncation.
"""

import unittest

import numpy as np
import scipy.linalg

from balancing import BalancingKind, balance
from error_handler import DimensionError, PreconditionError
from lmi import SolverOptions, eigvalsh
from lqgsyn import (Controller, ControllerKind, build_lcr, build_lqg_controller, build_observer, build_rcr,
                    build_reduced_lqg_controller, coprime_report, lcr_gramians, lqg_bound, lqg_closure_report,
                    lqg_design, rcr_gramians, riccati_report, solve_gd_riccati)
from sysmodel import build_vertices, builtin_dc_motor, linear_plant

A_STABLE = np.array([[-1.0, 0.4, 0.0, 0.0],
                     [-0.4, -2.0, 0.3, 0.0],
                     [0.0, -0.3, -3.0, 0.2],
                     [0.0, 0.0, -0.2, -4.0]])
B_STABLE = np.array([[1.0], [0.5], [0.0], [0.0]])
C_STABLE = np.array([[1.0, 0.0, 0.2, 0.0]])


def care_pair(A: np.ndarray, B: np.ndarray, C: np.ndarray):
    """Stabilizing solutions of the control and filter algebraic Riccati equations"""
    P = scipy.linalg.solve_continuous_are(A, B, C.T @ C, np.eye(B.shape[1]))
    Q = scipy.linalg.solve_continuous_are(A.T, C.T, B @ B.T, np.eye(C.shape[0]))
    return P, Q


class TestRiccatiOracle(unittest.TestCase):
    """Linear plants: the inequalities reduce to the algebraic Riccati equations"""

    def setUp(self):
        """Set up the linear plant and its CARE solutions"""
        self.plant = linear_plant(A_STABLE, B_STABLE, C_STABLE, epsilon=0.0)
        self.vertices = build_vertices(self.plant)
        self.P, self.Q = care_pair(A_STABLE, B_STABLE, C_STABLE)

    def test_care_solutions_pass_checker(self):
        """Test that the CARE solutions meet both inequalities with equality"""
        report = riccati_report(self.vertices.vertices, self.plant.B, self.plant.C, self.P, self.Q, 0.0)
        self.assertLessEqual(report.worst, 1e-8)

    def test_feasible_pair_dominates(self):
        """Test P >= P_care and Q >= Q_care for a feasible pair"""
        pair = solve_gd_riccati(self.plant, self.vertices)
        self.assertGreaterEqual(eigvalsh(pair.P - self.P)[0], -1e-6)
        self.assertGreaterEqual(eigvalsh(pair.Q - self.Q)[0], -1e-6)

    def test_max_trace_recovers_care(self):
        """Test that the largest inverse variables give back the CARE solutions"""
        pair = solve_gd_riccati(self.plant, self.vertices, "max-trace", options=SolverOptions(tol=1e-7))
        self.assertAlmostEqual(np.trace(pair.P) / np.trace(self.P), 1.0, places=3)
        self.assertAlmostEqual(np.trace(pair.Q) / np.trace(self.Q), 1.0, places=3)

    def test_rcr_gramians(self):
        """Test the right coprime representation Gramians on the CARE pair"""
        X, Y = rcr_gramians(self.P, self.Q)
        np.testing.assert_allclose(X, np.linalg.inv(self.P + np.linalg.inv(self.Q)), rtol=1e-10)
        rcr = build_rcr(self.plant, self.P)
        self.assertEqual(rcr.C.shape, (2, 4))
        feedback = -self.plant.B @ self.plant.B.T @ self.P
        report = coprime_report(rcr, self.vertices, feedback, X, Y)
        self.assertLessEqual(report.worst, 1e-7)

    def test_lcr_gramians(self):
        """Test the left coprime representation Gramians on the CARE pair"""
        X, Y = lcr_gramians(self.P, self.Q)
        lcr = build_lcr(self.plant, self.Q)
        self.assertEqual(lcr.B.shape, (4, 2))
        feedback = -self.Q @ self.plant.C.T @ self.plant.C
        report = coprime_report(lcr, self.vertices, feedback, X, Y)
        self.assertLessEqual(report.worst, 1e-7)


class TestControllers(unittest.TestCase):
    """Observer and observer-based controllers"""

    def setUp(self):
        """Set up the linear plant with its CARE pair"""
        self.plant = linear_plant(A_STABLE, B_STABLE, C_STABLE, epsilon=0.0)
        self.P, self.Q = care_pair(A_STABLE, B_STABLE, C_STABLE)

    def test_observer_gain(self):
        """Test L = Q C^T and refusal of indefinite Q"""
        observer = build_observer(self.plant, self.Q)
        np.testing.assert_allclose(observer.L, self.Q @ C_STABLE.T)
        with self.assertRaises(PreconditionError):
            build_observer(self.plant, -self.Q)

    def test_controller_matrices(self):
        """Test A_c, L_c and K_c of the full-order controller"""
        controller = build_lqg_controller(self.plant, self.P, self.Q)
        K = B_STABLE.T @ self.P
        L = self.Q @ C_STABLE.T
        np.testing.assert_allclose(controller.A_c, -B_STABLE @ K - L @ C_STABLE)
        np.testing.assert_allclose(controller.K_c, K)
        self.assertEqual(controller.kind, ControllerKind.LQG)
        self.assertFalse(controller.certified)

    def test_separation(self):
        """Test that the linear closed loop is Hurwitz"""
        controller = build_lqg_controller(self.plant, self.P, self.Q)
        closed = np.block([[A_STABLE, -B_STABLE @ controller.K_c],
                           [controller.L_c @ C_STABLE, A_STABLE + controller.A_c]])
        self.assertLess(np.max(np.linalg.eigvals(closed).real), 0.0)

    def test_certified_with_contraction(self):
        """Test that eps > 0 certifies the full-order controller"""
        plant = linear_plant(A_STABLE, B_STABLE, C_STABLE, epsilon=0.01)
        self.assertTrue(build_lqg_controller(plant, self.P, self.Q).certified)

    def test_dimension_checks(self):
        """Test that mismatched controller matrices are refused"""
        with self.assertRaises(DimensionError):
            build_lqg_controller(self.plant, np.eye(3), self.Q)
        controller = build_lqg_controller(self.plant, self.P, self.Q)
        with self.assertRaises(DimensionError):
            Controller(ControllerKind.LQG, controller.field, np.eye(3), controller.L_c, controller.K_c)

    def test_reduced_needs_lqg_balancing(self):
        """Test that a GD balanced realization cannot give a reduced LQG controller"""
        balanced = balance(self.plant, None, self.Q, self.P, BalancingKind.GD)
        with self.assertRaises(PreconditionError):
            build_reduced_lqg_controller(balanced, 2)


class TestLqgDesign(unittest.TestCase):
    """End-to-end LQG balancing of the DC motor"""

    @classmethod
    def setUpClass(cls):
        """Run the design once with a second-order reduced controller"""
        cls.plant = builtin_dc_motor()
        cls.vertices = build_vertices(cls.plant)
        cls.design = lqg_design(cls.plant, cls.vertices, r=2)

    def test_balanced(self):
        """Test that P and Q are both balanced to diag(pi)"""
        balanced = self.design.balanced
        self.assertEqual(balanced.kind, BalancingKind.LQG)
        T, T_inv = balanced.T, balanced.T_inv
        np.testing.assert_allclose(T @ self.design.pair.Q @ T.T, np.diag(balanced.sigma), atol=1e-8)
        np.testing.assert_allclose(T_inv.T @ self.design.pair.P @ T_inv, np.diag(balanced.sigma), atol=1e-8)

    def test_full_controller_certified(self):
        """Test the full-order controller at eps > 0"""
        self.assertTrue(self.design.controller.certified)
        self.assertEqual(self.design.controller.order, 3)

    def test_reduced_controller(self):
        """Test the uncertified reduced controller"""
        reduced = self.design.reduced_controller
        self.assertIsNotNone(reduced)
        self.assertEqual(reduced.order, 2)
        self.assertEqual(reduced.kind, ControllerKind.LQG_REDUCED)
        self.assertFalse(reduced.certified)
        self.assertEqual((reduced.p, reduced.m), (2, 1))

    def test_closure(self):
        """Test that Pi_1 solves the truncated Riccati inequalities"""
        report = lqg_closure_report(self.design.balanced, 2)
        self.assertLessEqual(report.worst, 1e-6 * max(1.0, float(self.design.balanced.sigma[0]) ** 2))

    def test_bound(self):
        """Test the coprime truncation bound"""
        self.assertAlmostEqual(lqg_bound([1.0, 0.5], 1), 2 * 0.5 / np.sqrt(1.25))
        self.assertEqual(lqg_bound([1.0, 0.5], 2), 0.0)
        bounds = [lqg_bound(self.design.balanced.sigma, r) for r in range(1, 4)]
        self.assertTrue(all(a >= b for a, b in zip(bounds, bounds[1:])))

    def test_to_dict(self):
        """Test the design summary"""
        data = self.design.to_dict()
        self.assertIn("reduced_controller", data)
        self.assertEqual(len(data["bound_table"]), 3)


def run_lqgsyn_tests() -> bool:
    suite = unittest.TestSuite()
    for test_class in [TestRiccatiOracle, TestControllers, TestLqgDesign]:
        suite.addTests(unittest.TestLoader().loadTestsFromTestCase(test_class))
    return unittest.TextTestRunner(verbosity=2).run(suite).wasSuccessful()


if __name__ == "__main__":
    unittest.main(verbosity=2)
