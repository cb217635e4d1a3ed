"""
Vector Field Expressions
========================

Parsing, evaluation and exact differentiation of vector fields f(x) written as
text, plus interval bounds on Jacobian entries for polytope vertex generation.

Grammar (conventional precedence, ``^`` and ``**`` both mean integer power):

    field   := expr (NEWLINE | ';') expr ...
    expr    := term (('+' | '-') term)*
    term    := unary ('*' unary)*
    unary   := ('-' | '+') unary | power
    power   := atom (('^' | '**') ['-'] INTEGER)?
    atom    := NUMBER | 'x' INDEX | FUNC '(' expr ')' | '(' expr ')'
    FUNC    := sin | cos | tanh | arctan | atan
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import Polynomial

from error_handler import DimensionError, ExpressionSyntaxError

logger = logging.getLogger(__name__)

FUNCTIONS = ("sin", "cos", "tanh", "arctan")
FUNCTION_ALIASES = {"atan": "arctan"}
ODD_FUNCTIONS = ("sin", "tanh", "arctan")

Number = Union[float, np.ndarray]


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------

class Expression:
    """Base class of the immutable expression tree"""

    precedence = 5

    def __str__(self) -> str:
        return to_source(self)


@dataclass(frozen=True)
class Num(Expression):
    value: float


@dataclass(frozen=True)
class Var(Expression):
    index: int  # 1-based, x1..xn


@dataclass(frozen=True)
class Neg(Expression):
    arg: Expression
    precedence = 3


@dataclass(frozen=True)
class Add(Expression):
    left: Expression
    right: Expression
    precedence = 1


@dataclass(frozen=True)
class Sub(Expression):
    left: Expression
    right: Expression
    precedence = 1


@dataclass(frozen=True)
class Mul(Expression):
    left: Expression
    right: Expression
    precedence = 2


@dataclass(frozen=True)
class Pow(Expression):
    base: Expression
    exponent: int
    precedence = 4


@dataclass(frozen=True)
class Func(Expression):
    name: str
    arg: Expression


ZERO = Num(0.0)
ONE = Num(1.0)


def is_const(node: Expression) -> bool:
    return isinstance(node, Num)


# Smart constructors fold only trivial identities (0 and 1) and constant
# subtrees; they are not a simplifier.

def add(a: Expression, b: Expression) -> Expression:
    if is_const(a) and is_const(b):
        return Num(a.value + b.value)
    if a == ZERO:
        return b
    if b == ZERO:
        return a
    return Add(a, b)


def sub(a: Expression, b: Expression) -> Expression:
    if is_const(a) and is_const(b):
        return Num(a.value - b.value)
    if b == ZERO:
        return a
    if a == ZERO:
        return neg(b)
    return Sub(a, b)


def mul(a: Expression, b: Expression) -> Expression:
    if is_const(a) and is_const(b):
        return Num(a.value * b.value)
    if a == ZERO or b == ZERO:
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    if a == Num(-1.0):
        return neg(b)
    if b == Num(-1.0):
        return neg(a)
    return Mul(a, b)


def neg(a: Expression) -> Expression:
    if is_const(a):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def power(base: Expression, exponent: int) -> Expression:
    if exponent == 0:
        return ONE
    if exponent == 1:
        return base
    if is_const(base):
        return Num(float(np.power(base.value, exponent)))
    return Pow(base, exponent)


# ---------------------------------------------------------------------------
# Tokenizer and parser
# ---------------------------------------------------------------------------

_TOKEN_SPEC = [
    ("NUMBER", r"(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?"),
    ("NAME", r"[A-Za-z_][A-Za-z_0-9]*"),
    ("POW", r"\*\*|\^"),
    ("OP", r"[+\-*(),;]"),
    ("NEWLINE", r"\n"),
    ("SKIP", r"[ \t\r]+"),
    ("MISMATCH", r"."),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{name}>{pattern})" for name, pattern in _TOKEN_SPEC))
_VARIABLE_RE = re.compile(r"x(\d+)$")


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int


def tokenize(source: str) -> List[Token]:
    tokens: List[Token] = []
    line, line_start = 1, 0
    for match in _TOKEN_RE.finditer(source):
        kind = match.lastgroup
        text = match.group()
        column = match.start() - line_start + 1
        if kind == "NEWLINE":
            tokens.append(Token("SEP", text, line, column))
            line += 1
            line_start = match.end()
        elif kind == "SKIP":
            continue
        elif kind == "MISMATCH":
            raise ExpressionSyntaxError(f"unexpected character {text!r}", line, column)
        elif kind == "OP" and text == ";":
            tokens.append(Token("SEP", text, line, column))
        else:
            tokens.append(Token(kind, text, line, column))
    tokens.append(Token("END", "", line, len(source) - line_start + 1))
    return tokens


class _Parser:
    """Recursive descent parser over the token list of one field"""

    def __init__(self, tokens: List[Token], n: int):
        self.tokens = tokens
        self.pos = 0
        self.n = n

    @property
    def current(self) -> Token:
        return self.tokens[self.pos]

    def _advance(self) -> Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def _error(self, message: str, token: Optional[Token] = None):
        token = token or self.current
        if token.kind == "END":
            message = f"{message} at end of input"
        raise ExpressionSyntaxError(message, token.line, token.column)

    def _expect(self, text: str):
        if self.current.text != text or self.current.kind not in ("OP", "POW"):
            self._error(f"expected {text!r}, found {self.current.text or 'nothing'!r}")
        self._advance()

    def parse_field(self) -> List[Expression]:
        components: List[Expression] = []
        while True:
            while self.current.kind == "SEP":
                self._advance()
            if self.current.kind == "END":
                break
            components.append(self.parse_expr())
            if self.current.kind not in ("SEP", "END"):
                self._error(f"unexpected {self.current.text!r}")
        return components

    def parse_expr(self) -> Expression:
        node = self.parse_term()
        while self.current.kind == "OP" and self.current.text in "+-":
            op = self._advance().text
            right = self.parse_term()
            node = Add(node, right) if op == "+" else Sub(node, right)
        return node

    def parse_term(self) -> Expression:
        node = self.parse_unary()
        while self.current.kind == "OP" and self.current.text == "*":
            self._advance()
            node = Mul(node, self.parse_unary())
        return node

    def parse_unary(self) -> Expression:
        if self.current.kind == "OP" and self.current.text == "-":
            self._advance()
            return Neg(self.parse_unary())
        if self.current.kind == "OP" and self.current.text == "+":
            self._advance()
            return self.parse_unary()
        return self.parse_power()

    def parse_power(self) -> Expression:
        base = self.parse_atom()
        if self.current.kind == "POW":
            self._advance()
            sign = 1
            if self.current.kind == "OP" and self.current.text == "-":
                self._advance()
                sign = -1
            token = self.current
            if token.kind != "NUMBER" or not token.text.isdigit():
                self._error("exponent must be an integer literal")
            self._advance()
            return Pow(base, sign * int(token.text))
        return base

    def parse_atom(self) -> Expression:
        token = self.current
        if token.kind == "NUMBER":
            self._advance()
            return Num(float(token.text))
        if token.kind == "NAME":
            self._advance()
            name = FUNCTION_ALIASES.get(token.text, token.text)
            if name in FUNCTIONS:
                self._expect("(")
                arg = self.parse_expr()
                self._expect(")")
                return Func(name, arg)
            match = _VARIABLE_RE.match(token.text)
            if not match:
                self._error(f"unknown identifier {token.text!r}", token)
            index = int(match.group(1))
            if not 1 <= index <= self.n:
                self._error(f"variable {token.text} out of range x1..x{self.n}", token)
            return Var(index)
        if token.kind == "OP" and token.text == "(":
            self._advance()
            node = self.parse_expr()
            self._expect(")")
            return node
        if token.kind == "END":
            self._error("syntax error")
        self._error(f"unexpected {token.text!r}")


def parse_expression(source: str, n: int) -> Expression:
    """Parse a single expression over x1..xn"""
    parser = _Parser(tokenize(source), n)
    while parser.current.kind == "SEP":
        parser._advance()
    node = parser.parse_expr()
    while parser.current.kind == "SEP":
        parser._advance()
    if parser.current.kind != "END":
        parser._error(f"unexpected {parser.current.text!r}")
    return node


def parse_vector_field(source: Union[str, Sequence[str]], n: int) -> List[Expression]:
    """
    Parse one expression per state component.

    Args:
        source: text with one component per line (or ';'-separated), or a list of
            component strings
        n: state dimension

    Returns:
        List[Expression]: n expressions
    """
    if n < 1:
        raise DimensionError(f"state dimension must be positive, got {n}")
    if isinstance(source, str):
        components = _Parser(tokenize(source), n).parse_field()
    else:
        components = [parse_expression(text, n) for text in source]
    if len(components) != n:
        raise DimensionError(f"expected {n} field components, got {len(components)}",
                             context={"components": len(components)})
    return components


# ---------------------------------------------------------------------------
# Printing and code generation
# ---------------------------------------------------------------------------

def _format_number(value: float) -> str:
    return repr(float(value))


def to_source(node: Expression) -> str:
    """Print an expression so that parsing it again gives the same evaluation"""
    if isinstance(node, Num):
        text = _format_number(node.value)
        return f"({text})" if node.value < 0 or text.startswith("-") else text
    if isinstance(node, Var):
        return f"x{node.index}"
    if isinstance(node, Func):
        return f"{node.name}({to_source(node.arg)})"
    if isinstance(node, Neg):
        return "-" + _wrap(node.arg, Neg.precedence)
    if isinstance(node, Pow):
        return f"{_wrap(node.base, 5)}^{node.exponent}"
    if isinstance(node, (Add, Sub, Mul)):
        op = {Add: " + ", Sub: " - ", Mul: " * "}[type(node)]
        left = _wrap(node.left, node.precedence)
        right = _wrap(node.right, node.precedence + 1)
        return left + op + right
    raise TypeError(f"not an expression: {node!r}")


def _wrap(node: Expression, min_precedence: int) -> str:
    text = to_source(node)
    if isinstance(node, Num) and node.value < 0:
        return text
    return text if node.precedence >= min_precedence else f"({text})"


def to_numpy_code(node: Expression) -> str:
    """Python source evaluating the expression on an array ``x`` (row i-1 is xi)"""
    if isinstance(node, Num):
        return f"({_format_number(node.value)})"
    if isinstance(node, Var):
        return f"x[{node.index - 1}]"
    if isinstance(node, Neg):
        return f"np.negative({to_numpy_code(node.arg)})"
    if isinstance(node, Add):
        return f"np.add({to_numpy_code(node.left)}, {to_numpy_code(node.right)})"
    if isinstance(node, Sub):
        return f"np.subtract({to_numpy_code(node.left)}, {to_numpy_code(node.right)})"
    if isinstance(node, Mul):
        return f"np.multiply({to_numpy_code(node.left)}, {to_numpy_code(node.right)})"
    if isinstance(node, Pow):
        return f"np.power({to_numpy_code(node.base)}, {float(node.exponent)!r})"
    if isinstance(node, Func):
        return f"np.{node.name}({to_numpy_code(node.arg)})"
    raise TypeError(f"not an expression: {node!r}")


def compile_expressions(nodes: Sequence[Expression]) -> Callable[[np.ndarray], np.ndarray]:
    """
    Compile expressions into one vectorized function.

    The returned function takes ``x`` of shape (n,) or (n, batch) and returns an
    array of shape (len(nodes),) or (len(nodes), batch).
    """
    lines = ["def _compiled(x):",
             "    out = np.empty((%d,) + x.shape[1:], dtype=float)" % len(nodes)]
    for i, node in enumerate(nodes):
        lines.append(f"    out[{i}] = {to_numpy_code(node)}")
    lines.append("    return out")
    namespace: Dict[str, object] = {"np": np}
    exec("\n".join(lines), namespace)
    compiled = namespace["_compiled"]

    def run(x):
        return compiled(np.asarray(x, dtype=float))

    return run


def evaluate(node: Expression, x: Sequence[float]) -> Number:
    """Evaluate one expression by walking the tree (same numpy operations as the compiled form)"""
    x = np.asarray(x, dtype=float)
    if isinstance(node, Num):
        return np.float64(node.value)
    if isinstance(node, Var):
        return x[node.index - 1]
    if isinstance(node, Neg):
        return np.negative(evaluate(node.arg, x))
    if isinstance(node, Add):
        return np.add(evaluate(node.left, x), evaluate(node.right, x))
    if isinstance(node, Sub):
        return np.subtract(evaluate(node.left, x), evaluate(node.right, x))
    if isinstance(node, Mul):
        return np.multiply(evaluate(node.left, x), evaluate(node.right, x))
    if isinstance(node, Pow):
        return np.power(evaluate(node.base, x), float(node.exponent))
    if isinstance(node, Func):
        return getattr(np, node.name)(evaluate(node.arg, x))
    raise TypeError(f"not an expression: {node!r}")


def eval_field(field: Sequence[Expression], x: Sequence[float]) -> np.ndarray:
    """Componentwise evaluation of a parsed field at one state"""
    x = np.asarray(x, dtype=float)
    n = max([0] + [max_variable(node) for node in field])
    if x.shape[0] < n:
        raise DimensionError(f"state has dimension {x.shape[0]}, field uses x{n}")
    return np.array([evaluate(node, x) for node in field], dtype=float)


# ---------------------------------------------------------------------------
# Structure queries and rewriting
# ---------------------------------------------------------------------------

def children(node: Expression) -> Tuple[Expression, ...]:
    if isinstance(node, (Neg, Func)):
        return (node.arg,)
    if isinstance(node, (Add, Sub, Mul)):
        return (node.left, node.right)
    if isinstance(node, Pow):
        return (node.base,)
    return ()


def variables(node: Expression) -> frozenset:
    if isinstance(node, Var):
        return frozenset([node.index])
    result = frozenset()
    for child in children(node):
        result |= variables(child)
    return result


def max_variable(node: Expression) -> int:
    indices = variables(node)
    return max(indices) if indices else 0


def substitute(node: Expression, mapping: Dict[int, Expression]) -> Expression:
    """Replace variables by expressions (used to shift coordinates)"""
    if isinstance(node, Var):
        return mapping.get(node.index, node)
    if isinstance(node, Num):
        return node
    if isinstance(node, Neg):
        return Neg(substitute(node.arg, mapping))
    if isinstance(node, Func):
        return Func(node.name, substitute(node.arg, mapping))
    if isinstance(node, Pow):
        return Pow(substitute(node.base, mapping), node.exponent)
    return type(node)(substitute(node.left, mapping), substitute(node.right, mapping))


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------

def diff(node: Expression, index: int) -> Expression:
    """Exact partial derivative with respect to x_index"""
    if isinstance(node, Num):
        return ZERO
    if isinstance(node, Var):
        return ONE if node.index == index else ZERO
    if index not in variables(node):
        return ZERO
    if isinstance(node, Neg):
        return neg(diff(node.arg, index))
    if isinstance(node, Add):
        return add(diff(node.left, index), diff(node.right, index))
    if isinstance(node, Sub):
        return sub(diff(node.left, index), diff(node.right, index))
    if isinstance(node, Mul):
        return add(mul(diff(node.left, index), node.right),
                   mul(node.left, diff(node.right, index)))
    if isinstance(node, Pow):
        k = node.exponent
        return mul(mul(Num(float(k)), power(node.base, k - 1)), diff(node.base, index))
    if isinstance(node, Func):
        inner = diff(node.arg, index)
        if node.name == "sin":
            outer = Func("cos", node.arg)
        elif node.name == "cos":
            outer = neg(Func("sin", node.arg))
        elif node.name == "tanh":
            outer = sub(ONE, Pow(Func("tanh", node.arg), 2))
        else:
            outer = Pow(add(ONE, Pow(node.arg, 2)), -1)
        return mul(outer, inner)
    raise TypeError(f"not an expression: {node!r}")


def jacobian(field: Sequence[Expression], n: Optional[int] = None) -> List[List[Expression]]:
    """n x n matrix of symbolic partial derivatives"""
    n = n if n is not None else len(field)
    return [[diff(component, j) for j in range(1, n + 1)] for component in field]


# ---------------------------------------------------------------------------
# Interval arithmetic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    """Closed interval over the extended reals"""
    lo: float
    hi: float

    def __post_init__(self):
        if math.isnan(self.lo) or math.isnan(self.hi) or self.lo > self.hi:
            raise ValueError(f"invalid interval [{self.lo}, {self.hi}]")

    @classmethod
    def point(cls, value: float) -> "Interval":
        return cls(value, value)

    @classmethod
    def real_line(cls) -> "Interval":
        return cls(-math.inf, math.inf)

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.lo) and math.isfinite(self.hi)

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def radius(self) -> float:
        return 0.5 * (self.hi - self.lo)

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def intersect(self, other: "Interval") -> "Interval":
        return Interval(max(self.lo, other.lo), min(self.hi, other.hi))

    def to_list(self) -> List[float]:
        return [self.lo, self.hi]


def _mul_bound(a: float, b: float) -> float:
    if a == 0.0 or b == 0.0:
        return 0.0
    return a * b


def _interval_mul(a: Interval, b: Interval) -> Interval:
    products = [_mul_bound(x, y) for x in (a.lo, a.hi) for y in (b.lo, b.hi)]
    return Interval(min(products), max(products))


def _pow_bound(value: float, k: int) -> float:
    if math.isinf(value):
        if k < 0:
            return 0.0
        return math.inf if value > 0 or k % 2 == 0 else -math.inf
    if value == 0.0 and k < 0:
        return math.inf
    return float(value) ** k


def _interval_pow(a: Interval, k: int) -> Interval:
    if k == 0:
        return Interval.point(1.0)
    if k > 0:
        if k % 2 == 1 or a.lo >= 0:
            return Interval(_pow_bound(a.lo, k), _pow_bound(a.hi, k))
        if a.hi <= 0:
            return Interval(_pow_bound(a.hi, k), _pow_bound(a.lo, k))
        return Interval(0.0, max(_pow_bound(a.lo, k), _pow_bound(a.hi, k)))
    # negative exponent
    if a.lo > 0:
        return Interval(_pow_bound(a.hi, k), _pow_bound(a.lo, k))
    if a.hi < 0:
        if k % 2 == 0:
            return Interval(_pow_bound(a.lo, k), _pow_bound(a.hi, k))
        return Interval(_pow_bound(a.hi, k), _pow_bound(a.lo, k))
    if k % 2 == 0:
        ends = [_pow_bound(v, k) for v in (a.lo, a.hi) if v != 0.0]
        return Interval(min(ends) if ends else 0.0, math.inf)
    return Interval.real_line()


def _interval_sin(a: Interval) -> Interval:
    if not a.bounded or a.hi - a.lo >= 2 * math.pi:
        return Interval(-1.0, 1.0)
    lo = min(math.sin(a.lo), math.sin(a.hi))
    hi = max(math.sin(a.lo), math.sin(a.hi))
    # maxima at pi/2 + 2k pi, minima at -pi/2 + 2k pi
    k_max = math.ceil((a.lo - math.pi / 2) / (2 * math.pi))
    if math.pi / 2 + 2 * math.pi * k_max <= a.hi:
        hi = 1.0
    k_min = math.ceil((a.lo + math.pi / 2) / (2 * math.pi))
    if -math.pi / 2 + 2 * math.pi * k_min <= a.hi:
        lo = -1.0
    return Interval(lo, hi)


def _monotone(func: Callable[[float], float], a: Interval) -> Interval:
    return Interval(func(a.lo), func(a.hi))


def interval_eval(node: Expression, box: Sequence[Interval]) -> Interval:
    """Natural interval extension of an expression over a box"""
    if isinstance(node, Num):
        return Interval.point(node.value)
    if isinstance(node, Var):
        return box[node.index - 1]
    if isinstance(node, Neg):
        inner = interval_eval(node.arg, box)
        return Interval(-inner.hi, -inner.lo)
    if isinstance(node, Add):
        a, b = interval_eval(node.left, box), interval_eval(node.right, box)
        return Interval(a.lo + b.lo, a.hi + b.hi)
    if isinstance(node, Sub):
        a, b = interval_eval(node.left, box), interval_eval(node.right, box)
        return Interval(a.lo - b.hi, a.hi - b.lo)
    if isinstance(node, Mul):
        return _interval_mul(interval_eval(node.left, box), interval_eval(node.right, box))
    if isinstance(node, Pow):
        return _interval_pow(interval_eval(node.base, box), node.exponent)
    if isinstance(node, Func):
        inner = interval_eval(node.arg, box)
        if node.name == "sin":
            return _interval_sin(inner)
        if node.name == "cos":
            return _interval_sin(Interval(inner.lo + math.pi / 2, inner.hi + math.pi / 2))
        if node.name == "tanh":
            return _monotone(math.tanh, inner)
        return _monotone(math.atan, inner)
    raise TypeError(f"not an expression: {node!r}")


def _as_polynomial(node: Expression, index: int) -> Optional[Polynomial]:
    """Coefficients of a univariate polynomial in x_index, or None"""
    if isinstance(node, Num):
        return Polynomial([node.value])
    if isinstance(node, Var):
        return Polynomial([0.0, 1.0]) if node.index == index else None
    if isinstance(node, Neg):
        inner = _as_polynomial(node.arg, index)
        return None if inner is None else -inner
    if isinstance(node, (Add, Sub, Mul)):
        left = _as_polynomial(node.left, index)
        right = _as_polynomial(node.right, index)
        if left is None or right is None:
            return None
        if isinstance(node, Add):
            return left + right
        if isinstance(node, Sub):
            return left - right
        return left * right
    if isinstance(node, Pow) and node.exponent >= 0:
        base = _as_polynomial(node.base, index)
        return None if base is None else base ** node.exponent
    return None


def univariate_polynomial(node: Expression) -> Optional[Tuple[int, Polynomial]]:
    """(variable index, polynomial) when the expression is a polynomial in one variable"""
    used = variables(node)
    if len(used) != 1:
        return None
    index = next(iter(used))
    poly = _as_polynomial(node, index)
    return None if poly is None else (index, poly)


def _polynomial_range(poly: Polynomial, domain: Interval) -> Interval:
    poly = poly.trim()
    coef = poly.coef
    degree = len(coef) - 1
    if degree <= 0:
        return Interval.point(float(coef[0]))
    candidates: List[float] = []
    for end in (domain.lo, domain.hi):
        if math.isfinite(end):
            candidates.append(float(poly(end)))
        else:
            lead = coef[-1]
            sign = 1.0 if (end > 0 or degree % 2 == 0) else -1.0
            candidates.append(math.copysign(math.inf, lead * sign))
    for root in poly.deriv().roots():
        if abs(root.imag) <= 1e-9 * max(1.0, abs(root.real)) and domain.contains(root.real):
            candidates.append(float(poly(root.real)))
    return Interval(min(candidates), max(candidates))


def _widen(interval: Interval) -> Interval:
    def pad(value: float) -> float:
        return 1e-12 * max(1.0, abs(value)) if math.isfinite(value) else 0.0
    return Interval(interval.lo - pad(interval.lo), interval.hi + pad(interval.hi))


def derivative_range(node: Expression, domain: Optional[Sequence[Interval]] = None,
                     n: Optional[int] = None) -> Interval:
    """
    Enclosure of the values of a Jacobian entry over a box.

    Interval arithmetic gives a sound (possibly wide) enclosure; when the entry
    is a polynomial in a single variable its exact range is used instead.
    Unbounded results are returned with infinite endpoints, never as errors.
    """
    n = n if n is not None else max(1, max_variable(node))
    box = list(domain) if domain is not None else [Interval.real_line()] * n
    if len(box) < max_variable(node):
        raise DimensionError(f"domain has {len(box)} intervals, entry uses x{max_variable(node)}")
    result = interval_eval(node, box)
    polynomial = univariate_polynomial(node)
    if polynomial is not None:
        index, poly = polynomial
        exact = _polynomial_range(poly, box[index - 1])
        if exact.lo <= result.hi and result.lo <= exact.hi:
            result = result.intersect(exact)
    return _widen(result)


# ---------------------------------------------------------------------------
# Additive decomposition into scalar nonlinear factors
# ---------------------------------------------------------------------------

def _affine_form(node: Expression) -> Optional[Tuple[Dict[int, float], float]]:
    """(coefficients, constant) when the expression is affine in x, else None"""
    if isinstance(node, Num):
        return {}, node.value
    if isinstance(node, Var):
        return {node.index: 1.0}, 0.0
    if isinstance(node, Neg):
        inner = _affine_form(node.arg)
        if inner is None:
            return None
        return {k: -v for k, v in inner[0].items()}, -inner[1]
    if isinstance(node, (Add, Sub)):
        left, right = _affine_form(node.left), _affine_form(node.right)
        if left is None or right is None:
            return None
        sign = 1.0 if isinstance(node, Add) else -1.0
        coefficients = dict(left[0])
        for k, v in right[0].items():
            coefficients[k] = coefficients.get(k, 0.0) + sign * v
        return coefficients, left[1] + sign * right[1]
    if isinstance(node, Mul):
        left, right = _affine_form(node.left), _affine_form(node.right)
        if left is None or right is None:
            return None
        if not left[0]:
            return {k: left[1] * v for k, v in right[0].items()}, left[1] * right[1]
        if not right[0]:
            return {k: right[1] * v for k, v in left[0].items()}, left[1] * right[1]
    return None


def _affine_node(coefficients: Dict[int, float], constant: float) -> Expression:
    node: Expression = ZERO
    for index in sorted(coefficients):
        c = coefficients[index]
        if c == 0.0:
            continue
        term = mul(Num(abs(c)), Var(index))
        node = add(node, term) if c > 0 else sub(node, term)
    if constant:
        node = add(node, Num(constant)) if constant > 0 else sub(node, Num(-constant))
    return node


def canonical_factor(node: Expression) -> Tuple[float, Expression]:
    """
    Canonical form of a scalar factor up to sign.

    Function arguments that are affine in x are normalized so that the lowest
    variable has a positive coefficient; cos is even, sin/tanh/arctan are odd,
    so cos(x2 - x1) and cos(x1 - x2) share one canonical factor.
    """
    if isinstance(node, Func):
        form = _affine_form(node.arg)
        nonzero = [k for k, v in form[0].items() if v != 0.0] if form is not None else []
        if nonzero:
            coefficients, constant = form
            sign = 1.0
            if coefficients[min(nonzero)] < 0:
                coefficients = {k: -v for k, v in coefficients.items()}
                constant = -constant
                sign = -1.0 if node.name in ODD_FUNCTIONS else 1.0
            return sign, Func(node.name, _affine_node(coefficients, constant))
    return 1.0, node


def _flatten_product(node: Expression) -> Tuple[float, List[Expression]]:
    if isinstance(node, Mul):
        c1, f1 = _flatten_product(node.left)
        c2, f2 = _flatten_product(node.right)
        return c1 * c2, f1 + f2
    if isinstance(node, Neg):
        c, factors = _flatten_product(node.arg)
        return -c, factors
    if isinstance(node, Num):
        return node.value, []
    return 1.0, [node]


def additive_terms(node: Expression) -> Tuple[float, List[Tuple[float, Expression]]]:
    """
    Split an expression into constant + sum of coefficient * factor.

    Returns:
        (constant, [(coefficient, canonical factor), ...]) where each factor
        depends on x and carries no numeric coefficient.
    """
    if isinstance(node, Num):
        return node.value, []
    if isinstance(node, (Add, Sub)):
        c1, t1 = additive_terms(node.left)
        c2, t2 = additive_terms(node.right)
        if isinstance(node, Sub):
            c2, t2 = -c2, [(-coef, factor) for coef, factor in t2]
        return c1 + c2, t1 + t2
    if isinstance(node, Neg):
        c, terms = additive_terms(node.arg)
        return -c, [(-coef, factor) for coef, factor in terms]
    coefficient, factors = _flatten_product(node)
    if not factors:
        return coefficient, []
    if len(factors) == 1:
        sign, canonical = canonical_factor(factors[0])
        return 0.0, [(coefficient * sign, canonical)]
    product = factors[0]
    for factor in factors[1:]:
        product = Mul(product, factor)
    return 0.0, [(coefficient, product)]
