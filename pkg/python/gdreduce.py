"""
GD Balanced Reduction
=====================

Solve the vertex-relaxed GD Lyapunov inequalities

    A_i X + X A_i^T + B B^T + eps X <= 0,    Y A_i + A_i^T Y + C^T C + eps Y <= 0,

balance the Gramian pair, truncate and bound the reduction error.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from balancing import (BalancedRealization, BalancingKind, ReducedModel, balance, balance_blocks,
                       mask_blocks, truncate, truncate_blocks)
from error_handler import PreconditionError, handle_stage_error
from lmi import (LmiProblem, LmiSolution, Sense, SolverOptions, ViolationReport, check_matrices,
                 eigvalsh, lyapunov_constraint, maximize_trace, minimize_trace, solve, sym)
from expr import Expression, Num, add, mul, substitute
from sysmodel import ExpressionField, PlantModel, VertexSet, check_oddness, linear_expressions

logger = logging.getLogger(__name__)

RECHECK_TOLERANCE = 1e-7
OBJECTIVES = ("none", "min-trace", "min-trace-X+max-trace-Y")


def controllability_matrix(A: np.ndarray, B: np.ndarray, X: np.ndarray, epsilon: float) -> np.ndarray:
    return sym(A @ X + X @ A.T + B @ B.T + epsilon * X)


def observability_matrix(A: np.ndarray, C: np.ndarray, Y: np.ndarray, epsilon: float) -> np.ndarray:
    return sym(Y @ A + A.T @ Y + C.T @ C + epsilon * Y)


def lyapunov_report(vertices: Sequence[np.ndarray], B: np.ndarray, C: np.ndarray,
                    X: Optional[np.ndarray], Y: Optional[np.ndarray], epsilon: float) -> ViolationReport:
    """Checker run of both GD Lyapunov inequalities (and positivity) at every vertex"""
    named = []
    if X is not None:
        named.append(("X > 0", X, Sense.PSD))
        named.extend((f"controllability[{i}]", controllability_matrix(A, B, X, epsilon), Sense.NSD)
                     for i, A in enumerate(vertices))
    if Y is not None:
        named.append(("Y > 0", Y, Sense.PSD))
        named.extend((f"observability[{i}]", observability_matrix(A, C, Y, epsilon), Sense.NSD)
                     for i, A in enumerate(vertices))
    return check_matrices(named)


@dataclass
class GdGramians:
    X: np.ndarray
    Y: np.ndarray
    epsilon: float
    report: ViolationReport
    solutions: Dict[str, LmiSolution] = field(default_factory=dict)
    mask: Optional[np.ndarray] = None

    @property
    def worst_violation(self) -> float:
        return self.report.worst

    def eigenvalue_table(self) -> pd.DataFrame:
        """Eigenvalues of X and Y in descending order"""
        return pd.DataFrame({"index": np.arange(1, self.X.shape[0] + 1),
                             "lambda_X": eigvalsh(self.X)[::-1],
                             "lambda_Y": eigvalsh(self.Y)[::-1]})

    def to_dict(self) -> Dict[str, object]:
        return {"epsilon": self.epsilon, "X": self.X.tolist(), "Y": self.Y.tolist(),
                "worst_violation": self.report.worst,
                "solver": {name: solution.to_dict() for name, solution in self.solutions.items()}}


def _gramian_problem(name: str, vertices: VertexSet, constant: np.ndarray, epsilon: float,
                     transpose: bool, mask: Optional[np.ndarray]) -> LmiProblem:
    problem = LmiProblem(name)
    V = problem.add_variable(name, vertices.n, mask=mask)
    problem.add_positive(V)
    for i, A in enumerate(vertices):
        lyapunov_constraint(problem, V, A.T if transpose else A, constant, epsilon, f"{name}[{i}]")
    return problem


@handle_stage_error("gramians")
def solve_gd_gramians(plant: PlantModel, vertices: VertexSet, objective: str = "none",
                      mask: Optional[np.ndarray] = None,
                      options: Optional[SolverOptions] = None) -> GdGramians:
    """
    Solve the controllability and observability LMIs at every vertex.

    Args:
        objective: "none" (feasibility), "min-trace" (smallest trace of X and of Y) or
            "min-trace-X+max-trace-Y" (smallest X, largest Y; an unbounded Y ends as
            status unknown with the divergence flag set)
        mask: optional block-diagonal structure for both Gramians

    Raises:
        InfeasibleError: either LMI family is infeasible or inconclusive
    """
    if objective not in OBJECTIVES:
        raise PreconditionError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if vertices.n != plant.n:
        raise PreconditionError(f"vertices are {vertices.n} x {vertices.n}, plant has n = {plant.n}")
    if not vertices.sound:
        logger.warning(f"⚠️ Vertex set ({vertices.strategy.value}) is not certified to cover the "
                       f"Jacobians; Gramians are certified for the vertices only")
    epsilon = plant.epsilon
    solutions: Dict[str, LmiSolution] = {}
    values: Dict[str, np.ndarray] = {}
    for name, constant, transpose in (("X", plant.B @ plant.B.T, False), ("Y", plant.C.T @ plant.C, True)):
        problem = _gramian_problem(name, vertices, constant, epsilon, transpose, mask)
        if objective == "min-trace" or (objective != "none" and name == "X"):
            solution = minimize_trace(problem, name, options)
        elif objective != "none":
            solution = maximize_trace(problem, name, options)
        else:
            solution = solve(problem, options)
        solutions[name] = solution.require_feasible("gramians")
        values[name] = solution[name]

    report = lyapunov_report(vertices.vertices, plant.B, plant.C, values["X"], values["Y"], epsilon)
    logger.info(f"✅ GD Gramians (eps = {epsilon:g}), checker worst violation {report.worst:.3e}")
    return GdGramians(values["X"], values["Y"], epsilon, report, solutions, mask)


@dataclass
class GdReduction:
    balanced: BalancedRealization
    reduced: ReducedModel
    bound: float
    certified: bool
    notes: List[str]
    closure: ViolationReport

    def to_dict(self) -> Dict[str, object]:
        return {"balanced": self.balanced.to_dict(), "reduced": self.reduced.to_dict(),
                "bound": self.bound, "certified": self.certified, "notes": list(self.notes),
                "closure_worst_violation": self.closure.worst}


def bound_certification(plant: PlantModel, vertices: VertexSet, seed: int = 0) -> Tuple[bool, List[str]]:
    """Whether the error bound hypotheses hold: odd field with f(0) = 0 and sound vertices"""
    notes = []
    oddness = check_oddness(plant, seed=seed)
    if not oddness.passed:
        notes.append(f"not certified: field is not odd (residual {oddness.residual:.3e})")
    origin = float(np.max(np.abs(plant.field.evaluate(np.zeros(plant.n)))))
    if origin > 1e-9:
        notes.append(f"not certified: f(0) != 0 (|f(0)| = {origin:.3e}); shift the equilibrium first")
    if not vertices.sound:
        notes.append(f"not certified: vertex set ({vertices.strategy.value}) is not sound")
    return not notes, notes


@handle_stage_error("reduce")
def gd_reduce(plant: PlantModel, vertices: VertexSet, r, gramians: Optional[GdGramians] = None,
              block_orders: Optional[Sequence[int]] = None, options: Optional[SolverOptions] = None,
              seed: int = 0) -> GdReduction:
    """
    Balance with the GD Gramians and truncate to order r.

    With a structure mask on the Gramians, block_orders selects how many states
    each block keeps (structure-preserving reduction).
    """
    gramians = gramians or solve_gd_gramians(plant, vertices, options=options)
    if gramians.mask is not None:
        blocks = mask_blocks(gramians.mask)
        balanced = balance_blocks(plant, vertices, gramians.X, gramians.Y, blocks, BalancingKind.GD)
        if block_orders is None:
            raise PreconditionError("structure-preserving reduction needs one order per block")
        reduced = truncate_blocks(balanced, block_orders)
    else:
        balanced = balance(plant, vertices, gramians.X, gramians.Y, BalancingKind.GD)
        reduced = truncate(balanced, r)

    certified, notes = bound_certification(plant, vertices, seed)
    reduced.certified = certified
    reduced.notes = notes
    r_kept = reduced.r
    sigma_kept = balanced.sigma[reduced.kept]
    S1 = np.diag(sigma_kept)
    closure = lyapunov_report(reduced.vertices.vertices, reduced.plant.B, reduced.plant.C, S1, S1,
                              plant.epsilon)
    if certified:
        logger.info(f"✅ Reduced to r = {r_kept}, error bound {reduced.bound:.6g}")
    else:
        logger.warning(f"⚠️ Reduced to r = {r_kept}, bound {reduced.bound:.6g} NOT certified: {'; '.join(notes)}")
    return GdReduction(balanced, reduced, reduced.bound, certified, notes, closure)


def reduced_field_expressions(plant: PlantModel, T: np.ndarray, T_inv: np.ndarray,
                              kept: Sequence[int]) -> Optional[List[Expression]]:
    """
    Symbolic reduced field z_r -> [T f(T^-1 (z_r, 0))]_kept, or None when the
    plant field is not expression-backed.
    """
    if not isinstance(plant.field, ExpressionField):
        return None
    embedding = linear_expressions(T_inv[:, list(kept)])
    mapping = {j + 1: node for j, node in enumerate(embedding)}
    shifted = [substitute(component, mapping) for component in plant.field.components]
    reduced = []
    for i in kept:
        node: Expression = Num(0.0)
        for j, component in enumerate(shifted):
            if T[i, j] != 0.0:
                node = add(node, mul(Num(float(T[i, j])), component))
        reduced.append(node)
    return reduced
