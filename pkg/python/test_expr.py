"""
Expression Test Suite
=====================

Parsing, printing, evaluation, differentiation and interval bounds of
vector field expressions.
"""

import math
import unittest

import numpy as np

from error_handler import DimensionError, ExpressionSyntaxError
from expr import (Func, Interval, Num, Var, additive_terms, canonical_factor, compile_expressions,
                  derivative_range, diff, eval_field, evaluate, jacobian, parse_expression,
                  parse_vector_field, substitute, to_source)


class TestParsing(unittest.TestCase):
    """Grammar, precedence and error positions"""

    def test_precedence(self):
        """Test that unary minus binds looser than power"""
        node = parse_expression("-x1^2", 1)
        self.assertAlmostEqual(float(evaluate(node, [3.0])), -9.0)

    def test_power_spellings(self):
        """Test that ^ and ** are the same operator"""
        a = parse_expression("x1^3 - 2*x1", 1)
        b = parse_expression("x1**3 - 2*x1", 1)
        self.assertEqual(a, b)

    def test_negative_exponent(self):
        """Test negative integer exponents"""
        node = parse_expression("x1^-2", 1)
        self.assertAlmostEqual(float(evaluate(node, [2.0])), 0.25)

    def test_atan_alias(self):
        """Test that atan parses as arctan"""
        self.assertEqual(parse_expression("atan(x1)", 1), Func("arctan", Var(1)))

    def test_field_separators(self):
        """Test newline and semicolon separated components"""
        by_newline = parse_vector_field("x2\n-x1 - x2", 2)
        by_semicolon = parse_vector_field("x2; -x1 - x2", 2)
        self.assertEqual(by_newline, by_semicolon)
        self.assertEqual(len(by_newline), 2)

    def test_component_count_mismatch(self):
        """Test that a field with the wrong number of components is rejected"""
        with self.assertRaises(DimensionError):
            parse_vector_field(["x1", "x2", "x1"], 2)

    def test_variable_out_of_range(self):
        """Test that x3 is rejected in a 2-state field with its position"""
        with self.assertRaises(ExpressionSyntaxError) as ctx:
            parse_expression("x1 + x3", 2)
        self.assertEqual(ctx.exception.line, 1)
        self.assertEqual(ctx.exception.column, 6)

    def test_syntax_errors(self):
        """Test malformed inputs"""
        for source in ["x1 +", "sin x1", "x1 $ 2", "x1^1.5", "(x1", "foo(x1)"]:
            with self.subTest(source=source):
                with self.assertRaises(ExpressionSyntaxError):
                    parse_expression(source, 1)

    def test_error_line_numbers(self):
        """Test that the line of a bad component is reported"""
        with self.assertRaises(ExpressionSyntaxError) as ctx:
            parse_vector_field("x1\nx1 + )", 2)
        self.assertEqual(ctx.exception.line, 2)


class TestPrinting(unittest.TestCase):
    """to_source output parses back to the same values"""

    def test_reparse_matches(self):
        """Test printing and reparsing at sample points"""
        sources = ["-3*x1 + sin(x2 - x1)", "x1 - (x2 - x3)", "-(x1 + x2)^3", "(-2.5)*x1*x2",
                   "tanh(x1) * arctan(x2) - cos(x3)^2", "x1^-1 + 1e-3"]
        rng = np.random.default_rng(0)
        for source in sources:
            node = parse_expression(source, 3)
            again = parse_expression(to_source(node), 3)
            for _ in range(5):
                x = rng.uniform(0.5, 2.0, 3)
                with self.subTest(source=source):
                    self.assertAlmostEqual(float(evaluate(node, x)), float(evaluate(again, x)), places=12)

    def test_full_precision_literals(self):
        """Test that literals survive printing exactly"""
        value = 0.1 + 0.2
        node = parse_expression(to_source(Num(value)), 1)
        self.assertEqual(node.value, value)


class TestEvaluation(unittest.TestCase):
    """Tree walking, compiled evaluation and eval_field"""

    def setUp(self):
        """Set up a small field"""
        self.field = parse_vector_field(["x2", "sin(x1) - 2*x2 + x3", "-5*x2 - 5*x3"], 3)

    def test_eval_field(self):
        """Test componentwise evaluation"""
        value = eval_field(self.field, [math.pi / 2, 1.0, 2.0])
        np.testing.assert_allclose(value, [1.0, 1.0, -15.0])

    def test_eval_field_short_state(self):
        """Test that a state shorter than the field's variables is rejected"""
        with self.assertRaises(DimensionError):
            eval_field(self.field, [1.0, 2.0])

    def test_compiled_matches_tree(self):
        """Test that compiled and tree evaluation agree on a batch"""
        compiled = compile_expressions(self.field)
        rng = np.random.default_rng(1)
        batch = rng.standard_normal((3, 7))
        values = compiled(batch)
        self.assertEqual(values.shape, (3, 7))
        for k in range(7):
            np.testing.assert_allclose(values[:, k], eval_field(self.field, batch[:, k]), rtol=0, atol=1e-14)


class TestDifferentiation(unittest.TestCase):
    """Symbolic derivatives against finite differences"""

    def test_jacobian_matches_finite_differences(self):
        """Test the symbolic Jacobian at random points"""
        field = parse_vector_field(["-x1 - x1^3 + sin(x2 - x1)", "tanh(x1*x2) - arctan(x2)^2"], 2)
        J = jacobian(field)
        rng = np.random.default_rng(2)
        h = 1e-6
        for _ in range(5):
            x = rng.uniform(-1.5, 1.5, 2)
            for i in range(2):
                for j in range(2):
                    step = np.zeros(2)
                    step[j] = h
                    numeric = (evaluate(field[i], x + step) - evaluate(field[i], x - step)) / (2 * h)
                    self.assertAlmostEqual(float(evaluate(J[i][j], x)), float(numeric), places=6)

    def test_constant_derivative_is_zero(self):
        """Test that a derivative in an absent variable folds to zero"""
        self.assertEqual(diff(parse_expression("sin(x1)", 2), 2), Num(0.0))

    def test_substitute(self):
        """Test variable substitution"""
        node = parse_expression("x1 * x2", 2)
        shifted = substitute(node, {1: parse_expression("x1 + 1", 2)})
        self.assertAlmostEqual(float(evaluate(shifted, [1.0, 3.0])), 6.0)


class TestIntervals(unittest.TestCase):
    """Jacobian entry enclosures"""

    def test_cos_range(self):
        """Test that cos over the real line is [-1, 1]"""
        entry = parse_expression("cos(x1)", 1)
        result = derivative_range(entry)
        self.assertAlmostEqual(result.lo, -1.0, places=9)
        self.assertAlmostEqual(result.hi, 1.0, places=9)

    def test_polynomial_refinement(self):
        """Test the exact range of a univariate polynomial"""
        entry = parse_expression("-1 - 2*x1 - 3*x1^2", 1)
        result = derivative_range(entry)
        self.assertEqual(result.lo, -math.inf)
        self.assertAlmostEqual(result.hi, -2.0 / 3.0, places=9)

    def test_bounded_domain(self):
        """Test that a bounded domain bounds a cubic derivative"""
        entry = parse_expression("-1 - 3*x1^2", 1)
        result = derivative_range(entry, [Interval(-2.0, 1.0)])
        self.assertAlmostEqual(result.lo, -13.0, places=9)
        self.assertAlmostEqual(result.hi, -1.0, places=9)

    def test_enclosure_contains_samples(self):
        """Test that sampled values lie inside the interval enclosure"""
        entry = parse_expression("x1 * cos(x2) + tanh(x1)", 2)
        box = [Interval(-1.0, 2.0), Interval(0.0, 3.0)]
        result = derivative_range(entry, box)
        rng = np.random.default_rng(3)
        for _ in range(200):
            x = [rng.uniform(-1.0, 2.0), rng.uniform(0.0, 3.0)]
            self.assertTrue(result.contains(float(evaluate(entry, x))))

    def test_invalid_interval(self):
        """Test that reversed bounds are rejected"""
        with self.assertRaises(ValueError):
            Interval(1.0, 0.0)


class TestDecomposition(unittest.TestCase):
    """Canonical factors for Jacobian grouping"""

    def test_cos_is_even(self):
        """Test that cos(x2 - x1) and cos(x1 - x2) share a factor and sign"""
        a = canonical_factor(parse_expression("cos(x2 - x1)", 2))
        b = canonical_factor(parse_expression("cos(x1 - x2)", 2))
        self.assertEqual(a, b)
        self.assertEqual(a[0], 1.0)

    def test_sin_is_odd(self):
        """Test that sin(x2 - x1) canonicalizes to -sin(x1 - x2)"""
        sign, factor = canonical_factor(parse_expression("sin(x2 - x1)", 2))
        self.assertEqual(sign, -1.0)
        self.assertEqual(factor, canonical_factor(parse_expression("sin(x1 - x2)", 2))[1])

    def test_additive_terms(self):
        """Test constant and coefficient extraction"""
        constant, terms = additive_terms(parse_expression("-2 + 3*cos(x1) - cos(x1)", 1))
        self.assertEqual(constant, -2.0)
        self.assertEqual([c for c, _ in terms], [3.0, -1.0])
        self.assertEqual(terms[0][1], terms[1][1])


def run_expr_tests() -> bool:
    suite = unittest.TestSuite()
    for test_class in [TestParsing, TestPrinting, TestEvaluation, TestDifferentiation, TestIntervals,
                       TestDecomposition]:
        suite.addTests(unittest.TestLoader().loadTestsFromTestCase(test_class))
    return unittest.TextTestRunner(verbosity=2).run(suite).wasSuccessful()


if __name__ == "__main__":
    unittest.main(verbosity=2)
