"""
GD Reduction Test Suite
=======================

GD Gramian LMIs against dense Lyapunov oracles, balanced truncation of
nonlinear plants, bound certification and the symbolic reduced field.
"""

import unittest

import numpy as np
import scipy.linalg

from error_handler import InfeasibleError, PreconditionError
from expr import eval_field
from gdreduce import (bound_certification, gd_reduce, lyapunov_report, reduced_field_expressions,
                      solve_gd_gramians)
from lmi import SolverOptions, block_diagonal_mask, eigvalsh, is_spd
from sysmodel import build_vertices, builtin_cubic, builtin_network_chain, linear_plant, plant_from_expressions

A_STABLE = np.array([[-1.0, 0.4, 0.0, 0.0],
                     [-0.4, -2.0, 0.3, 0.0],
                     [0.0, -0.3, -3.0, 0.2],
                     [0.0, 0.0, -0.2, -4.0]])
B_STABLE = np.array([[1.0], [0.5], [0.0], [0.0]])
C_STABLE = np.array([[1.0, 0.0, 0.2, 0.0]])


class TestLinearOracle(unittest.TestCase):
    """On a linear plant the GD Gramians dominate the Lyapunov Gramians"""

    def setUp(self):
        """Set up the linear plant and its dense Gramians"""
        self.plant = linear_plant(A_STABLE, B_STABLE, C_STABLE, epsilon=0.0)
        self.vertices = build_vertices(self.plant)
        self.Wc = scipy.linalg.solve_continuous_lyapunov(A_STABLE, -B_STABLE @ B_STABLE.T)
        self.Wo = scipy.linalg.solve_continuous_lyapunov(A_STABLE.T, -C_STABLE.T @ C_STABLE)

    def test_dense_gramians_pass_checker(self):
        """Test that the Lyapunov solutions satisfy the inequalities with equality"""
        report = lyapunov_report(self.vertices.vertices, self.plant.B, self.plant.C, self.Wc, self.Wo, 0.0)
        self.assertLessEqual(report.worst, 1e-8)

    def test_feasible_gramians_dominate(self):
        """Test X >= Wc and Y >= Wo for any feasible pair"""
        gramians = solve_gd_gramians(self.plant, self.vertices)
        self.assertTrue(is_spd(gramians.X))
        self.assertTrue(is_spd(gramians.Y))
        self.assertGreaterEqual(eigvalsh(gramians.X - self.Wc)[0], -1e-6)
        self.assertGreaterEqual(eigvalsh(gramians.Y - self.Wo)[0], -1e-6)

    def test_min_trace_recovers_lyapunov(self):
        """Test that the smallest-trace Gramians are the Lyapunov Gramians"""
        gramians = solve_gd_gramians(self.plant, self.vertices, "min-trace", options=SolverOptions(tol=1e-7))
        self.assertAlmostEqual(np.trace(gramians.X) / np.trace(self.Wc), 1.0, places=3)
        self.assertAlmostEqual(np.trace(gramians.Y) / np.trace(self.Wo), 1.0, places=3)

    def test_min_x_max_y_objective(self):
        """Test that maximizing trace Y over a stable linear plant is reported as diverged, not feasible"""
        with self.assertRaises(InfeasibleError) as ctx:
            solve_gd_gramians(self.plant, self.vertices, "min-trace-X+max-trace-Y")
        self.assertEqual(ctx.exception.stage, "gramians")
        self.assertEqual(ctx.exception.context["status"], "unknown")
        self.assertIn("diverged", ctx.exception.context)
        self.assertFalse(ctx.exception.solution.feasible)

    def test_unknown_objective(self):
        """Test that an unknown objective is refused with the stage name"""
        with self.assertRaises(PreconditionError) as ctx:
            solve_gd_gramians(self.plant, self.vertices, "max-trace")
        self.assertEqual(ctx.exception.stage, "gramians")

    def test_eigenvalue_table(self):
        """Test the descending eigenvalue table"""
        table = solve_gd_gramians(self.plant, self.vertices).eigenvalue_table()
        self.assertEqual(list(table.columns), ["index", "lambda_X", "lambda_Y"])
        self.assertTrue(np.all(np.diff(table["lambda_X"].to_numpy()) <= 0))


class TestNonlinearReduction(unittest.TestCase):
    """GD balanced truncation of the coupled chain"""

    @classmethod
    def setUpClass(cls):
        """Solve the Gramians once for a 4-node chain on the endpoint vertex family"""
        cls.plant = builtin_network_chain(4)
        cls.vertices = build_vertices(cls.plant, "one-at-a-time")
        cls.gramians = solve_gd_gramians(cls.plant, cls.vertices)

    def test_gramians_certified(self):
        """Test the checker certificate at every vertex"""
        self.assertLessEqual(self.gramians.worst_violation, 1e-7)
        self.assertEqual(len(self.gramians.report.violations), 2 + 2 * len(self.vertices))

    def test_reduce(self):
        """Test order and bound of a reduced chain, uncertified on unsound vertices"""
        result = gd_reduce(self.plant, self.vertices, 2, self.gramians)
        self.assertEqual(result.reduced.plant.n, 2)
        self.assertAlmostEqual(result.bound, 2 * float(np.sum(result.balanced.sigma[2:])))
        self.assertFalse(result.certified)
        self.assertTrue(any("not sound" in note for note in result.notes))
        self.assertLessEqual(max(result.balanced.residual), 1e-8)

    def test_closure_of_truncated_model(self):
        """Test that Sigma_1 remains a GD Gramian pair of the truncated vertices"""
        result = gd_reduce(self.plant, self.vertices, 2, self.gramians)
        scale = max(1.0, float(result.balanced.sigma[0]))
        self.assertLessEqual(result.closure.worst, 1e-6 * scale)

    def test_reduced_field_expressions(self):
        """Test that the printed reduced field matches the truncated field"""
        result = gd_reduce(self.plant, self.vertices, 2, self.gramians)
        balanced = result.balanced
        expressions = reduced_field_expressions(self.plant, balanced.T, balanced.T_inv, result.reduced.kept)
        self.assertEqual(len(expressions), 2)
        rng = np.random.default_rng(0)
        for _ in range(5):
            z = rng.standard_normal(2)
            np.testing.assert_allclose(eval_field(expressions, z), result.reduced.plant.field.evaluate(z),
                                       atol=1e-9)


class TestCertification(unittest.TestCase):
    """Hypotheses of the error bound"""

    def test_not_odd(self):
        """Test that a field with an even term is reduced but not certified"""
        plant = builtin_cubic(odd=False)
        vertices = build_vertices(plant)
        result = gd_reduce(plant, vertices, 1)
        self.assertFalse(result.certified)
        self.assertTrue(any("not odd" in note for note in result.notes))
        self.assertFalse(result.reduced.certified)

    def test_nonzero_origin(self):
        """Test that f(0) != 0 is reported"""
        plant = plant_from_expressions(["-x1 - x1^3 + 1"], [[1.0]], [[1.0]])
        certified, notes = bound_certification(plant, build_vertices(plant))
        self.assertFalse(certified)
        self.assertTrue(any("f(0)" in note for note in notes))


class TestStructuredReduction(unittest.TestCase):
    """Block-diagonal Gramians and per-block truncation"""

    def setUp(self):
        """Set up a weakly coupled two-block linear plant"""
        A = np.array([[-2.0, 0.3, 0.1, 0.0],
                      [-0.3, -2.0, 0.0, 0.1],
                      [0.1, 0.0, -3.0, 0.2],
                      [0.0, 0.1, -0.2, -3.0]])
        B = np.array([[1.0], [0.0], [0.5], [0.0]])
        C = np.array([[1.0, 0.0, 1.0, 0.0]])
        self.plant = linear_plant(A, B, C, epsilon=0.01)
        self.vertices = build_vertices(self.plant)
        self.mask = block_diagonal_mask([2, 2])

    def test_masked_gramians(self):
        """Test that the structure mask is honoured"""
        gramians = solve_gd_gramians(self.plant, self.vertices, mask=self.mask)
        np.testing.assert_array_equal(gramians.X[:2, 2:], 0.0)
        np.testing.assert_array_equal(gramians.Y[2:, :2], 0.0)

    def test_block_orders(self):
        """Test keeping the leading state of each block"""
        gramians = solve_gd_gramians(self.plant, self.vertices, mask=self.mask)
        result = gd_reduce(self.plant, self.vertices, None, gramians, block_orders=[1, 1])
        self.assertEqual(result.reduced.r, 2)
        self.assertEqual(result.reduced.kept, [0, 2])
        sigma = result.balanced.sigma
        self.assertAlmostEqual(result.bound, 2 * float(sigma[1] + sigma[3]))

    def test_block_orders_required(self):
        """Test that structured reduction without block orders is refused"""
        gramians = solve_gd_gramians(self.plant, self.vertices, mask=self.mask)
        with self.assertRaises(PreconditionError):
            gd_reduce(self.plant, self.vertices, 2, gramians)


def run_gdreduce_tests() -> bool:
    suite = unittest.TestSuite()
    for test_class in [TestLinearOracle, TestNonlinearReduction, TestCertification, TestStructuredReduction]:
        suite.addTests(unittest.TestLoader().loadTestsFromTestCase(test_class))
    return unittest.TextTestRunner(verbosity=2).run(suite).wasSuccessful()


if __name__ == "__main__":
    unittest.main(verbosity=2)
