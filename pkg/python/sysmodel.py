"""
Plant Model
===========

Nonlinear plants dx/dt = f(x) + B u, y = C x with Jacobian access, the builtin
example families, polytope vertex generation for the Jacobian and the
preprocessing steps (equilibrium shift, oddness check).
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from error_handler import ConvergenceError, DimensionError, PreconditionError
from expr import (Expression, Interval, Num, Var, add, additive_terms, compile_expressions,
                  derivative_range, jacobian, mul, parse_vector_field, substitute, to_source,
                  univariate_polynomial)

logger = logging.getLogger(__name__)

ODDNESS_TOLERANCE = 1e-9
MAX_BOX_CORNER_GROUPS = 12


# ---------------------------------------------------------------------------
# Vector fields
# ---------------------------------------------------------------------------

class VectorField:
    """
    A map f: R^n -> R^n evaluated on one state (n,) or a batch (n, N), with
    Jacobian access. Subclasses only implement evaluate and jacobian_at.
    """

    n: int

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian_at(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def expression_backed(self) -> bool:
        return False


class ExpressionField(VectorField):
    """Vector field backed by parsed expressions; Jacobian is symbolic"""

    def __init__(self, components: Sequence[Expression], n: Optional[int] = None):
        self.components: Tuple[Expression, ...] = tuple(components)
        self.n = n if n is not None else len(self.components)
        if len(self.components) != self.n:
            raise DimensionError(f"field has {len(self.components)} components, expected {self.n}")
        self._evaluate = compile_expressions(self.components)
        self._jacobian: Optional[List[List[Expression]]] = None
        self._jacobian_eval = None

    @classmethod
    def from_source(cls, source: Union[str, Sequence[str]], n: int) -> "ExpressionField":
        return cls(parse_vector_field(source, n), n)

    @property
    def expression_backed(self) -> bool:
        return True

    @property
    def sources(self) -> List[str]:
        return [to_source(component) for component in self.components]

    @property
    def jacobian(self) -> List[List[Expression]]:
        if self._jacobian is None:
            self._jacobian = jacobian(self.components, self.n)
        return self._jacobian

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise DimensionError(f"state has dimension {x.shape[0]}, expected {self.n}")
        return self._evaluate(x)

    def jacobian_at(self, x: np.ndarray) -> np.ndarray:
        if self._jacobian_eval is None:
            flat = [entry for row in self.jacobian for entry in row]
            self._jacobian_eval = compile_expressions(flat)
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise DimensionError(f"state has dimension {x.shape[0]}, expected {self.n}")
        values = self._jacobian_eval(x)
        return values.reshape((self.n, self.n) + x.shape[1:])


class TransformedField(VectorField):
    """z -> T f(T^-1 z)"""

    def __init__(self, base: VectorField, T: np.ndarray, T_inv: np.ndarray):
        self.base = base
        self.T = np.asarray(T, dtype=float)
        self.T_inv = np.asarray(T_inv, dtype=float)
        self.n = base.n

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        return self.T @ self.base.evaluate(self.T_inv @ np.asarray(z, dtype=float))

    def jacobian_at(self, z: np.ndarray) -> np.ndarray:
        return self.T @ self.base.jacobian_at(self.T_inv @ np.asarray(z, dtype=float)) @ self.T_inv


class TruncatedField(VectorField):
    """x_r -> first r components of f evaluated at (x_r, 0)"""

    def __init__(self, base: VectorField, r: int):
        if not 1 <= r <= base.n:
            raise DimensionError(f"truncation order {r} outside 1..{base.n}")
        self.base = base
        self.n = r

    def _embed(self, x_r: np.ndarray) -> np.ndarray:
        x_r = np.asarray(x_r, dtype=float)
        full = np.zeros((self.base.n,) + x_r.shape[1:])
        full[:self.n] = x_r
        return full

    def evaluate(self, x_r: np.ndarray) -> np.ndarray:
        return self.base.evaluate(self._embed(x_r))[:self.n]

    def jacobian_at(self, x_r: np.ndarray) -> np.ndarray:
        return self.base.jacobian_at(self._embed(x_r))[:self.n, :self.n]


class AffineField(VectorField):
    """x -> f(x) + A x, used for feedback-modified dynamics"""

    def __init__(self, base: VectorField, A: np.ndarray):
        self.base = base
        self.A = np.asarray(A, dtype=float)
        self.n = base.n
        if self.A.shape != (self.n, self.n):
            raise DimensionError(f"feedback matrix has shape {self.A.shape}, expected {(self.n, self.n)}")

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.base.evaluate(x) + self.A @ x

    def jacobian_at(self, x: np.ndarray) -> np.ndarray:
        jac = self.base.jacobian_at(x)
        if jac.ndim == 3:
            return jac + self.A[:, :, None]
        return jac + self.A


def linear_expressions(A: np.ndarray) -> List[Expression]:
    """Expression form of x -> A x with the exact matrix entries"""
    A = np.asarray(A, dtype=float)
    components = []
    for row in A:
        node: Expression = Num(0.0)
        for j, value in enumerate(row):
            node = add(node, mul(Num(float(value)), Var(j + 1)))
        components.append(node)
    return components


# ---------------------------------------------------------------------------
# Plant model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlantModel:
    """Plant dx/dt = f(x) + B u, y = C x with contraction rate epsilon"""
    field: VectorField
    B: np.ndarray
    C: np.ndarray
    epsilon: float = 0.01
    name: str = "plant"
    domain: Optional[Tuple[Interval, ...]] = None
    x_shift: Optional[np.ndarray] = None
    u_shift: Optional[np.ndarray] = None
    D: Optional[np.ndarray] = None  # feedthrough, zero when None

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        if self.D is not None:
            D = np.atleast_2d(np.asarray(self.D, dtype=float))
            if D.shape != (C.shape[0], B.shape[1]):
                raise DimensionError(f"D has shape {D.shape}, expected {(C.shape[0], B.shape[1])}")
            object.__setattr__(self, "D", D)
        n = self.field.n
        if B.shape[0] != n:
            raise DimensionError(f"B has {B.shape[0]} rows, state dimension is {n}")
        if C.shape[1] != n:
            raise DimensionError(f"C has {C.shape[1]} columns, state dimension is {n}")
        if self.epsilon < 0 or not math.isfinite(self.epsilon):
            raise PreconditionError(f"epsilon must be a finite nonnegative number, got {self.epsilon}")
        if self.domain is not None and len(self.domain) != n:
            raise DimensionError(f"domain has {len(self.domain)} intervals, state dimension is {n}")

    @property
    def n(self) -> int:
        return self.field.n

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def y_shift(self) -> Optional[np.ndarray]:
        return None if self.x_shift is None else self.C @ self.x_shift

    def rhs(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """f(x) + B u for one state or a batch"""
        return self.field.evaluate(x) + self.B @ np.asarray(u, dtype=float)

    def output(self, x: np.ndarray, u: Optional[np.ndarray] = None) -> np.ndarray:
        y = self.C @ np.asarray(x, dtype=float)
        if self.D is not None and u is not None:
            y = y + self.D @ np.asarray(u, dtype=float)
        return y

    def jacobian_at(self, x: np.ndarray) -> np.ndarray:
        return self.field.jacobian_at(x)

    def with_epsilon(self, epsilon: float) -> "PlantModel":
        return replace(self, epsilon=epsilon)

    def describe(self) -> Dict[str, object]:
        info: Dict[str, object] = {"name": self.name, "n": self.n, "m": self.m, "p": self.p,
                                   "epsilon": self.epsilon}
        if isinstance(self.field, ExpressionField):
            info["f"] = self.field.sources
        if self.x_shift is not None:
            info["x_shift"] = self.x_shift.tolist()
        return info


def plant_from_expressions(source: Union[str, Sequence[str]], B, C, epsilon: float = 0.01,
                           name: str = "custom", domain: Optional[Sequence[Interval]] = None
                           ) -> PlantModel:
    """Parse field text and assemble a plant"""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = B.shape[0]
    field = ExpressionField.from_source(source, n)
    return PlantModel(field, B, C, epsilon, name, tuple(domain) if domain is not None else None)


def linear_plant(A, B, C, epsilon: float = 0.0, name: str = "linear") -> PlantModel:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"A must be square, got shape {A.shape}")
    return PlantModel(ExpressionField(linear_expressions(A)), B, C, epsilon, name)


# ---------------------------------------------------------------------------
# Builtin families
# ---------------------------------------------------------------------------

def network_chain_sources(n: int, damping: float = 3.0) -> List[str]:
    sources = []
    for i in range(1, n + 1):
        terms = [f"-{damping!r}*x{i}"]
        if i > 1:
            terms.append(f"sin(x{i - 1} - x{i})")
        if i < n:
            terms.append(f"sin(x{i + 1} - x{i})")
        sources.append(" + ".join(terms))
    return sources


def builtin_network_chain(n: int, epsilon: float = 0.01, damping: float = 3.0) -> PlantModel:
    """
    Chain of n damped nodes coupled to their neighbours through sin of the
    state differences; the input drives node 1 and node 1 is measured.
    """
    if n < 2:
        raise PreconditionError(f"network chain requires n >= 2, got {n}")
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    C = np.zeros((1, n))
    C[0, 0] = 1.0
    field = ExpressionField.from_source(network_chain_sources(n, damping), n)
    return PlantModel(field, B, C, epsilon, f"network_chain_{n}")


DC_MOTOR_SOURCES = ["x2", "sin(x1) - 2*x2 + x3", "-5*x2 - 5*x3"]


def builtin_dc_motor(epsilon: float = 0.01) -> PlantModel:
    """Pendulum-type mechanical load (position, velocity) driven by a DC motor current"""
    B = np.array([[0.0], [0.0], [5.0]])
    C = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    return PlantModel(ExpressionField.from_source(DC_MOTOR_SOURCES, 3), B, C, epsilon, "dc_motor")


def builtin_cubic(odd: bool = True, epsilon: float = 0.1) -> PlantModel:
    """dx/dt = -x - x^3 + u (odd) or -x - x^2 - x^3 + u"""
    source = "-x1 - x1^3" if odd else "-x1 - x1^2 - x1^3"
    return PlantModel(ExpressionField.from_source([source], 1), [[1.0]], [[1.0]], epsilon,
                      "cubic" if odd else "cubic_not_odd")


BUILTIN_PLANTS = {
    "network_chain": builtin_network_chain,
    "dc_motor": builtin_dc_motor,
    "cubic": builtin_cubic,
}


def builtin_plant(name: str, **params) -> PlantModel:
    if name not in BUILTIN_PLANTS:
        raise PreconditionError(f"unknown builtin plant {name!r}; available: {sorted(BUILTIN_PLANTS)}")
    return BUILTIN_PLANTS[name](**params)


# ---------------------------------------------------------------------------
# Vertex generation
# ---------------------------------------------------------------------------

class VertexStrategy(Enum):
    """How the Jacobian polytope is spanned"""
    EXPLICIT = "explicit"
    ONE_AT_A_TIME = "one-at-a-time"
    SCALED_SOUND = "scaled-sound"
    BOX_CORNERS = "box-corners"


@dataclass
class JacobianGroup:
    """Jacobian entries moving together with one scalar nonlinearity s(x): s(x) * G"""
    key: str
    factor: Expression
    G: np.ndarray
    range: Optional[Interval] = None
    clipped: bool = False

    @property
    def entries(self) -> List[Tuple[int, int]]:
        return [(int(i) + 1, int(j) + 1) for i, j in zip(*np.nonzero(self.G))]

    def to_dict(self) -> Dict[str, object]:
        return {"factor": self.key, "entries": [list(e) for e in self.entries],
                "range": self.range.to_list() if self.range else None, "clipped": self.clipped}


@dataclass
class VertexSet:
    """Finite family of n x n matrices whose convex hull should cover the Jacobians"""
    vertices: Tuple[np.ndarray, ...]
    strategy: VertexStrategy
    sound: bool
    one_sided: bool = False
    groups: List[JacobianGroup] = field(default_factory=list)
    center: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = tuple(np.asarray(v, dtype=float) for v in self.vertices)
        if not self.vertices:
            raise DimensionError("vertex set is empty")
        n = self.vertices[0].shape[0]
        for vertex in self.vertices:
            if vertex.shape != (n, n):
                raise DimensionError(f"vertex of shape {vertex.shape} in a set of {n} x {n} vertices")

    @property
    def n(self) -> int:
        return self.vertices[0].shape[0]

    def __len__(self) -> int:
        return len(self.vertices)

    def __iter__(self):
        return iter(self.vertices)

    def transformed(self, T: np.ndarray, T_inv: np.ndarray) -> "VertexSet":
        """Vertices A_i -> T A_i T^-1"""
        center = None if self.center is None else T @ self.center @ T_inv
        return replace(self, vertices=tuple(T @ A @ T_inv for A in self.vertices), center=center)

    def leading_block(self, r: int) -> "VertexSet":
        center = None if self.center is None else self.center[:r, :r]
        return replace(self, vertices=tuple(A[:r, :r] for A in self.vertices), center=center)

    def shifted(self, delta: np.ndarray) -> "VertexSet":
        """Vertices A_i + delta (feedback-modified dynamics)"""
        center = None if self.center is None else self.center + delta
        return replace(self, vertices=tuple(A + delta for A in self.vertices), center=center)

    def entry_box(self) -> Tuple[np.ndarray, np.ndarray]:
        stack = np.stack(self.vertices)
        return stack.min(axis=0), stack.max(axis=0)

    def describe(self) -> Dict[str, object]:
        return {"strategy": self.strategy.value, "count": len(self.vertices), "sound": self.sound,
                "one_sided": self.one_sided, "groups": [g.to_dict() for g in self.groups]}


def jacobian_groups(field: ExpressionField) -> Tuple[np.ndarray, List[JacobianGroup]]:
    """
    Decompose the symbolic Jacobian as J(x) = J0 + sum_k s_k(x) G_k.

    Entries that are polynomials in a single variable are kept whole so the
    exact polynomial range applies; other entries are split into additive
    terms and grouped by canonical scalar factor.
    """
    n = field.n
    J0 = np.zeros((n, n))
    groups: Dict[str, JacobianGroup] = {}

    def add_term(i: int, j: int, coefficient: float, factor: Expression):
        key = to_source(factor)
        if key not in groups:
            groups[key] = JacobianGroup(key, factor, np.zeros((n, n)))
        groups[key].G[i, j] += coefficient

    for i, row in enumerate(field.jacobian):
        for j, entry in enumerate(row):
            constant, terms = additive_terms(entry)
            if not terms:
                J0[i, j] += constant
                continue
            if len(terms) > 1 and univariate_polynomial(entry) is not None:
                add_term(i, j, 1.0, entry)
                continue
            J0[i, j] += constant
            for coefficient, factor in terms:
                add_term(i, j, coefficient, factor)
    ordered = [g for g in groups.values() if np.any(g.G != 0.0)]
    return J0, ordered


def _clip_one_sided(group: JacobianGroup, value_range: Interval) -> Optional[float]:
    """Finite end to pin an unbounded dissipative diagonal group to, or None"""
    rows, cols = np.nonzero(group.G)
    if not np.all(rows == cols):
        return None
    signs = np.sign(group.G[rows, cols])
    if np.all(signs < 0) and math.isfinite(value_range.lo) and math.isinf(value_range.hi):
        return value_range.lo
    if np.all(signs > 0) and math.isfinite(value_range.hi) and math.isinf(value_range.lo):
        return value_range.hi
    return None


def build_vertices(plant: PlantModel, strategy: Union[VertexStrategy, str] = VertexStrategy.SCALED_SOUND,
                   domain: Optional[Sequence[Interval]] = None,
                   explicit: Optional[Sequence[np.ndarray]] = None,
                   allow_one_sided: bool = True) -> VertexSet:
    """
    Build the vertex set of the Jacobian polytope.

    Args:
        plant: plant with an expression-backed field (unless strategy is explicit)
        strategy: one-at-a-time, scaled-sound (default), box-corners or explicit
        domain: box of intervals per state, default the plant's domain or R^n
        explicit: vertex matrices for the explicit strategy
        allow_one_sided: pin half-unbounded dissipative diagonal groups to their finite end

    Returns:
        VertexSet: vertices with the strategy tag and soundness flag
    """
    strategy = VertexStrategy(strategy)
    if strategy == VertexStrategy.EXPLICIT:
        if not explicit:
            raise PreconditionError("explicit vertex strategy requires vertex matrices")
        vertex_set = VertexSet(tuple(explicit), strategy, sound=False)
        if vertex_set.n != plant.n:
            raise DimensionError(f"explicit vertices are {vertex_set.n} x {vertex_set.n}, plant has n = {plant.n}")
        return vertex_set

    if not isinstance(plant.field, ExpressionField):
        raise PreconditionError("vertex generation requires an expression-backed field; "
                                "use the explicit strategy for other fields")
    n = plant.n
    box = list(domain) if domain is not None else (list(plant.domain) if plant.domain else
                                                   [Interval.real_line()] * n)
    J0, groups = jacobian_groups(plant.field)
    A0 = J0.copy()
    deviations: List[np.ndarray] = []
    active: List[JacobianGroup] = []
    one_sided = False

    for group in groups:
        value_range = derivative_range(group.factor, box, n)
        group.range = value_range
        if value_range.bounded:
            A0 += value_range.midpoint * group.G
            if value_range.radius > 0.0:
                deviations.append(value_range.radius * group.G)
                active.append(group)
            continue
        pinned = _clip_one_sided(group, value_range) if allow_one_sided else None
        if pinned is None:
            i, j = group.entries[0]
            raise PreconditionError(
                f"Jacobian entry ({i},{j}) term {group.key} is unbounded on the domain "
                f"({value_range.lo}, {value_range.hi}); declare a bounded domain for x",
                context={"entry": [i, j], "factor": group.key})
        A0 += pinned * group.G
        group.clipped = True
        one_sided = True
        logger.warning(f"⚠️ One-sided clipping of {group.key} at {pinned:g}: valid for '<= 0' inequalities only")

    K = len(deviations)
    if K == 0:
        vertices = [A0]
    elif strategy == VertexStrategy.ONE_AT_A_TIME:
        vertices = [A0]
        for E in deviations:
            vertices.extend([A0 + E, A0 - E])
    elif strategy == VertexStrategy.SCALED_SOUND:
        vertices = []
        for E in deviations:
            vertices.extend([A0 + K * E, A0 - K * E])
    else:
        if K > MAX_BOX_CORNER_GROUPS:
            raise PreconditionError(f"box-corners needs 2^{K} vertices; at most "
                                    f"{MAX_BOX_CORNER_GROUPS} groups are supported")
        vertices = [A0 + sum(s * E for s, E in zip(signs, deviations))
                    for signs in itertools.product((1.0, -1.0), repeat=K)]

    covering = K == 0 or strategy in (VertexStrategy.SCALED_SOUND, VertexStrategy.BOX_CORNERS)
    sound = covering and (not one_sided or n == 1)
    vertex_set = VertexSet(tuple(vertices), strategy, sound, one_sided, groups, A0)
    logger.info(f"✅ {len(vertices)} vertices ({strategy.value}, {K} nonlinear groups, "
                f"{'sound' if sound else 'not certified sound'})")
    return vertex_set


def sample_domain(domain: Optional[Sequence[Interval]], n: int, count: int,
                  rng: np.random.Generator, scale: float = 10.0) -> np.ndarray:
    """Random states (n, count) inside a box; unbounded sides are sampled on +-scale"""
    box = list(domain) if domain is not None else [Interval.real_line()] * n
    samples = np.empty((n, count))
    for i, interval in enumerate(box):
        lo = interval.lo if math.isfinite(interval.lo) else -scale
        hi = interval.hi if math.isfinite(interval.hi) else scale
        if math.isfinite(interval.lo) and not math.isfinite(interval.hi):
            hi = interval.lo + 2 * scale
        if math.isfinite(interval.hi) and not math.isfinite(interval.lo):
            lo = interval.hi - 2 * scale
        samples[i] = rng.uniform(lo, hi, size=count)
    return samples


def jacobian_box_check(plant: PlantModel, vertices: VertexSet, samples: int = 200, seed: int = 0,
                       domain: Optional[Sequence[Interval]] = None) -> float:
    """Largest amount by which a sampled Jacobian entry leaves the vertex entry box (0 if inside)"""
    rng = np.random.default_rng(seed)
    lo, hi = vertices.entry_box()
    points = sample_domain(domain if domain is not None else plant.domain, plant.n, samples, rng)
    jac = plant.jacobian_at(points)
    excess = np.maximum(jac - hi[:, :, None], lo[:, :, None] - jac)
    return float(max(0.0, excess.max()))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

class ShiftedField(VectorField):
    """x_hat -> f(x_hat + x_star) + offset for fields without expressions"""

    def __init__(self, base: VectorField, x_star: np.ndarray, offset: np.ndarray):
        self.base = base
        self.x_star = np.asarray(x_star, dtype=float)
        self.offset = np.asarray(offset, dtype=float)
        self.n = base.n

    def _shift(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x + self.x_star.reshape((-1,) + (1,) * (x.ndim - 1))

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        value = self.base.evaluate(self._shift(x))
        return value + self.offset.reshape((-1,) + (1,) * (value.ndim - 1))

    def jacobian_at(self, x: np.ndarray) -> np.ndarray:
        return self.base.jacobian_at(self._shift(x))


def shift_to_equilibrium(plant: PlantModel, guess: Optional[Sequence[float]] = None,
                         u_star: Optional[Sequence[float]] = None, tol: float = 1e-10,
                         max_iter: int = 100) -> Tuple[PlantModel, np.ndarray]:
    """
    Move an equilibrium of f(x) + B u* to the origin by Newton iteration.

    Returns:
        (shifted plant, x_star); the shifted plant records x_star and u_star so
        outputs in original coordinates are y = C x_hat + C x_star. A declared
        domain is translated by -x_star.
    """
    n = plant.n
    u_star = np.zeros(plant.m) if u_star is None else np.asarray(u_star, dtype=float)
    if u_star.shape != (plant.m,):
        raise DimensionError(f"u_star has shape {u_star.shape}, expected ({plant.m},)")
    x = np.zeros(n) if guess is None else np.array(guess, dtype=float)
    if x.shape != (n,):
        raise DimensionError(f"guess has shape {x.shape}, expected ({n},)")
    forcing = plant.B @ u_star

    residual = plant.field.evaluate(x) + forcing
    for iteration in range(max_iter):
        if np.max(np.abs(residual)) <= tol:
            break
        try:
            step = scipy.linalg.solve(plant.jacobian_at(x), -residual)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise ConvergenceError(f"Newton step failed at iteration {iteration}: {exc}",
                                   context={"x": x.tolist()}) from exc
        x = x + step
        residual = plant.field.evaluate(x) + forcing
    else:
        if np.max(np.abs(residual)) > tol:
            raise ConvergenceError(f"Newton did not converge in {max_iter} iterations "
                                   f"(residual {np.max(np.abs(residual)):.3e})",
                                   context={"x": x.tolist()})
    logger.info(f"✅ Equilibrium found, |f(x*)| = {np.max(np.abs(residual)):.2e}")

    if np.all(x == 0.0) and np.all(forcing == 0.0):
        return plant, x

    if isinstance(plant.field, ExpressionField):
        mapping = {i + 1: add(Var(i + 1), Num(float(x[i]))) for i in range(n) if x[i] != 0.0}
        components = [substitute(component, mapping) for component in plant.field.components]
        components = [add(component, Num(float(forcing[i]))) for i, component in enumerate(components)]
        field: VectorField = ExpressionField(components, n)
    else:
        field = ShiftedField(plant.field, x, forcing)
    domain = None
    if plant.domain is not None:
        domain = tuple(Interval(float(d.lo - x[i]), float(d.hi - x[i])) for i, d in enumerate(plant.domain))
    shifted = replace(plant, field=field, x_shift=x, u_shift=u_star, domain=domain)
    return shifted, x


@dataclass(frozen=True)
class OddnessReport:
    residual: float
    passed: bool
    samples: int
    radius: float

    def to_dict(self) -> Dict[str, object]:
        return {"residual": self.residual, "passed": self.passed, "samples": self.samples,
                "radius": self.radius}


def check_oddness(plant: PlantModel, samples: int = 1000, radius: float = 10.0,
                  seed: int = 0) -> OddnessReport:
    """max over random states of |f(-x) + f(x)|_inf"""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-radius, radius, size=(plant.n, samples))
    residual = float(np.max(np.abs(plant.field.evaluate(-x) + plant.field.evaluate(x))))
    passed = residual <= ODDNESS_TOLERANCE
    if not passed:
        logger.warning(f"⚠️ Field is not odd (residual {residual:.3e})")
    return OddnessReport(residual, passed, samples, radius)
