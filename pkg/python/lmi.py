"""
Linear Matrix Inequalities
==========================

Finite families of affine symmetric-matrix inequalities over symmetric-matrix
and scalar decision variables, solved with cvxpy and rechecked by an
independent eigenvalue checker. Also hosts the dense symmetric kernels shared
by the balancing code.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cvxpy as cp
import numpy as np
import scipy.linalg

from error_handler import (DimensionError, InfeasibleError, NumericalError, PreconditionError,
                           RetryStrategy)

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 1e-7
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 5000
PARALLEL_CHECK_THRESHOLD = 16


# ---------------------------------------------------------------------------
# Dense symmetric kernels
# ---------------------------------------------------------------------------

def sym(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + A.T)


def sym_eigh(A: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of the symmetric part"""
    return scipy.linalg.eigh(sym(A))


def eigvalsh(A: np.ndarray) -> np.ndarray:
    return scipy.linalg.eigvalsh(sym(A))


def lambda_max(A: np.ndarray) -> float:
    return float(eigvalsh(A)[-1])


def lambda_min(A: np.ndarray) -> float:
    return float(eigvalsh(A)[0])


def cholesky_lower(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    try:
        return scipy.linalg.cholesky(sym(A), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite (Cholesky failed)") from exc


def spd_inv(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Inverse of an SPD matrix through its Cholesky factor"""
    try:
        factor = scipy.linalg.cho_factor(sym(A), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite (Cholesky failed)") from exc
    return sym(scipy.linalg.cho_solve(factor, np.eye(A.shape[0])))


def spd_sqrt(A: np.ndarray) -> np.ndarray:
    values, vectors = sym_eigh(A)
    if values[0] < 0:
        raise NumericalError(f"square root of an indefinite matrix (lambda_min = {values[0]:.3e})")
    return sym((vectors * np.sqrt(values)) @ vectors.T)


def is_spd(A: np.ndarray) -> bool:
    A = np.asarray(A, dtype=float)
    return A.ndim == 2 and A.shape[0] == A.shape[1] and np.allclose(A, A.T, rtol=1e-9, atol=1e-12) \
        and lambda_min(A) > 0.0


def block_diagonal_mask(blocks: Sequence[int]) -> np.ndarray:
    """Symmetric boolean mask of a block-diagonal pattern with the given block sizes"""
    if any(b < 1 for b in blocks):
        raise DimensionError(f"block sizes must be positive, got {list(blocks)}")
    return scipy.linalg.block_diag(*[np.ones((b, b), dtype=bool) for b in blocks]).astype(bool)


# ---------------------------------------------------------------------------
# Problem model
# ---------------------------------------------------------------------------

class VariableKind(Enum):
    SYMMETRIC = "symmetric"
    SCALAR = "scalar"


class Sense(Enum):
    """Constraint sense: matrix <= -margin I or matrix >= margin I"""
    NSD = "<=0"
    PSD = ">=0"


class SolveStatus(Enum):
    FEASIBLE = "feasible"
    INFEASIBLE_CERTIFIED = "infeasible-certified"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class LmiVariable:
    """Decision variable: a d x d symmetric matrix or a scalar"""
    name: str
    size: int = 1
    kind: VariableKind = VariableKind.SYMMETRIC
    mask: Optional[np.ndarray] = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if self.size < 1:
            raise DimensionError(f"variable {self.name} has size {self.size}")
        if self.kind == VariableKind.SCALAR and self.size != 1:
            raise DimensionError(f"scalar variable {self.name} must have size 1")
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != (self.size, self.size) or not np.array_equal(mask, mask.T):
                raise DimensionError(f"structure mask of {self.name} must be a symmetric "
                                     f"{self.size} x {self.size} pattern")
            if not mask.diagonal().all():
                raise DimensionError(f"structure mask of {self.name} must keep the diagonal")
            object.__setattr__(self, "mask", mask)

    @property
    def is_scalar(self) -> bool:
        return self.kind == VariableKind.SCALAR


@dataclass(frozen=True)
class AffineTerm:
    """
    Contribution of one variable to a constraint matrix.

    Matrix variables contribute left V right, plus its transpose when
    ``symmetrize`` is set. Scalar variables contribute v * left (right unused).
    """
    variable: LmiVariable
    left: np.ndarray
    right: Optional[np.ndarray] = None
    symmetrize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "left", np.atleast_2d(np.asarray(self.left, dtype=float)))
        if self.right is not None:
            object.__setattr__(self, "right", np.atleast_2d(np.asarray(self.right, dtype=float)))
        if self.variable.is_scalar:
            return
        if self.right is None:
            raise DimensionError(f"term in {self.variable.name} needs a right factor")
        d = self.variable.size
        if self.left.shape[1] != d or self.right.shape[0] != d:
            raise DimensionError(f"term factors {self.left.shape} x {self.right.shape} do not fit "
                                 f"variable {self.variable.name} of size {d}")

    @property
    def dim(self) -> int:
        return self.left.shape[0]

    def evaluate(self, value: Union[float, np.ndarray]) -> np.ndarray:
        if self.variable.is_scalar:
            return float(value) * self.left
        product = self.left @ np.asarray(value, dtype=float) @ self.right
        return product + product.T if self.symmetrize else product

    def expression(self, var: cp.Expression) -> cp.Expression:
        if self.variable.is_scalar:
            return var * self.left
        product = self.left @ var @ self.right
        return product + product.T if self.symmetrize else product


@dataclass
class LmiConstraint:
    """constant + sum(terms)  <= -margin I  (NSD)  or  >= margin I  (PSD)"""
    constant: np.ndarray
    terms: List[AffineTerm]
    sense: Sense = Sense.NSD
    label: str = ""
    margin: Optional[float] = None

    def __post_init__(self):
        self.constant = np.atleast_2d(np.asarray(self.constant, dtype=float))
        k = self.constant.shape[0]
        if self.constant.shape != (k, k):
            raise DimensionError(f"constraint {self.label}: constant must be square, got {self.constant.shape}")
        for term in self.terms:
            if term.left.shape[0] != k or (term.right is not None and not term.variable.is_scalar
                                           and term.right.shape[1] != k):
                raise DimensionError(f"constraint {self.label}: term in {term.variable.name} "
                                     f"does not produce a {k} x {k} matrix")
            if term.variable.is_scalar and term.left.shape != (k, k):
                raise DimensionError(f"constraint {self.label}: scalar coefficient must be {k} x {k}")
        if self.margin is not None and self.margin < 0:
            raise PreconditionError(f"constraint {self.label}: margin must be nonnegative")

    @property
    def dim(self) -> int:
        return self.constant.shape[0]

    def evaluate(self, assignment: Dict[str, Union[float, np.ndarray]]) -> np.ndarray:
        total = self.constant.copy()
        for term in self.terms:
            if term.variable.name not in assignment:
                raise DimensionError(f"assignment misses variable {term.variable.name}")
            total = total + term.evaluate(assignment[term.variable.name])
        return sym(total)


class LmiProblem:
    """A named set of variables and matrix inequalities with an optional trace objective"""

    def __init__(self, name: str = "lmi"):
        self.name = name
        self.variables: Dict[str, LmiVariable] = {}
        self.constraints: List[LmiConstraint] = []
        self.objective: Optional[Tuple[str, str]] = None

    def add_variable(self, name: str, size: int = 1, kind: VariableKind = VariableKind.SYMMETRIC,
                     mask: Optional[np.ndarray] = None) -> LmiVariable:
        if name in self.variables:
            raise PreconditionError(f"variable {name} declared twice")
        variable = LmiVariable(name, size, kind, mask)
        self.variables[name] = variable
        return variable

    def add_scalar(self, name: str) -> LmiVariable:
        return self.add_variable(name, 1, VariableKind.SCALAR)

    def add_constraint(self, constant: np.ndarray, terms: Sequence[AffineTerm],
                       sense: Sense = Sense.NSD, label: str = "",
                       margin: Optional[float] = None) -> LmiConstraint:
        if not terms:
            raise PreconditionError(f"constraint {label} has no decision variable terms")
        for term in terms:
            if self.variables.get(term.variable.name) is not term.variable:
                raise PreconditionError(f"constraint {label} uses undeclared variable {term.variable.name}")
        constraint = LmiConstraint(constant, list(terms), sense, label or f"c{len(self.constraints)}", margin)
        self.constraints.append(constraint)
        return constraint

    def add_positive(self, variable: LmiVariable, margin: Optional[float] = None,
                     label: Optional[str] = None) -> LmiConstraint:
        """variable >= margin I (scalars: >= margin)"""
        d = variable.size
        term = AffineTerm(variable, np.eye(d)) if variable.is_scalar else \
            AffineTerm(variable, np.eye(d), np.eye(d), symmetrize=False)
        return self.add_constraint(np.zeros((d, d)), [term], Sense.PSD,
                                   label or f"{variable.name} > 0", margin)

    def set_objective(self, variable: LmiVariable, direction: str = "max"):
        if direction not in ("max", "min"):
            raise PreconditionError(f"objective direction must be 'max' or 'min', got {direction!r}")
        if variable.name not in self.variables:
            raise PreconditionError(f"objective variable {variable.name} is not declared")
        self.objective = (variable.name, direction)


# ---------------------------------------------------------------------------
# Constraint builders
# ---------------------------------------------------------------------------

def lyapunov_terms(variable: LmiVariable, A: np.ndarray, epsilon: float = 0.0,
                   embed: Optional[np.ndarray] = None) -> List[AffineTerm]:
    """
    Terms of A V + V A^T + epsilon V, optionally embedded as E (...) E^T into a
    larger block matrix. Pass A^T to obtain V A + A^T V.
    """
    n = variable.size
    E = np.eye(n) if embed is None else np.asarray(embed, dtype=float)
    terms = [AffineTerm(variable, E @ A, E.T)]
    if epsilon:
        terms.append(AffineTerm(variable, 0.5 * epsilon * E, E.T))
    return terms


def lyapunov_constraint(problem: LmiProblem, variable: LmiVariable, A: np.ndarray,
                        constant: np.ndarray, epsilon: float = 0.0, label: str = "") -> LmiConstraint:
    """A V + V A^T + epsilon V + constant <= 0"""
    return problem.add_constraint(constant, lyapunov_terms(variable, A, epsilon), Sense.NSD, label)


def schur_constraint(problem: LmiProblem, variable: LmiVariable, A: np.ndarray, epsilon: float,
                     upper_left: np.ndarray, coupling: np.ndarray, label: str = "",
                     extra_terms: Sequence[AffineTerm] = ()) -> LmiConstraint:
    """
    [A V + V A^T + epsilon V + upper_left,  V coupling]
    [coupling^T V,                          -I        ]  <= 0

    which is equivalent to A V + V A^T + epsilon V + upper_left + V coupling coupling^T V <= 0.
    ``extra_terms`` act on the upper-left block (already embedded).
    """
    n = variable.size
    k = coupling.shape[1]
    E1 = np.vstack([np.eye(n), np.zeros((k, n))])
    E2 = np.vstack([np.zeros((n, k)), np.eye(k)])
    constant = scipy.linalg.block_diag(np.asarray(upper_left, dtype=float), -np.eye(k))
    terms = lyapunov_terms(variable, A, epsilon, E1)
    terms.append(AffineTerm(variable, E1, coupling @ E2.T))
    terms.extend(extra_terms)
    return problem.add_constraint(constant, terms, Sense.NSD, label)


# ---------------------------------------------------------------------------
# Checking
# ---------------------------------------------------------------------------

def matrix_violation(M: np.ndarray, sense: Sense = Sense.NSD) -> float:
    """Top eigenvalue of M (NSD sense) or of -M (PSD sense); <= 0 means satisfied"""
    values = eigvalsh(M)
    return float(values[-1]) if sense == Sense.NSD else float(-values[0])


@dataclass
class ViolationReport:
    violations: Dict[str, float]
    worst: float
    worst_label: Optional[str]

    def passed(self, tol: float = 0.0) -> bool:
        return self.worst <= tol

    def to_dict(self) -> Dict[str, object]:
        return {"violations": dict(self.violations), "worst": self.worst, "worst_label": self.worst_label}


def check_matrices(named: Sequence[Tuple[str, np.ndarray, Sense]]) -> ViolationReport:
    """Independent eigenvalue check of already assembled symmetric matrices"""
    def one(item):
        label, M, sense = item
        return label, matrix_violation(M, sense)

    if len(named) >= PARALLEL_CHECK_THRESHOLD:
        with ThreadPoolExecutor(max_workers=4) as executor:
            results = list(executor.map(one, named))
    else:
        results = [one(item) for item in named]
    violations = {label: value for label, value in results}
    if not results:
        return ViolationReport({}, float("-inf"), None)
    worst_label, worst = max(results, key=lambda item: item[1])
    return ViolationReport(violations, worst, worst_label)


def check(assignment: Dict[str, Union[float, np.ndarray]], problem: LmiProblem) -> ViolationReport:
    """
    Per-constraint top eigenvalue relative to the sense, computed from the
    assignment alone (no solver involvement).
    """
    for name, variable in problem.variables.items():
        if name not in assignment:
            raise DimensionError(f"assignment misses variable {name}")
        value = np.atleast_2d(np.asarray(assignment[name], dtype=float))
        if value.shape != (variable.size, variable.size):
            raise DimensionError(f"variable {name} expects {variable.size} x {variable.size}, "
                                 f"got {value.shape}")
    named = [(c.label, c.evaluate(assignment), c.sense) for c in problem.constraints]
    return check_matrices(named)


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverOptions:
    margin: float = DEFAULT_MARGIN
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    seed: int = 0
    backend: str = "CLARABEL"
    fallback_backend: Optional[str] = "SCS"
    retry: bool = True

    def __post_init__(self):
        if self.margin < 0 or self.tol <= 0 or self.max_iter < 1:
            raise PreconditionError("solver options need margin >= 0, tol > 0, max_iter >= 1")


@dataclass
class LmiSolution:
    values: Dict[str, Union[float, np.ndarray]]
    status: SolveStatus
    worst_violation: float
    violations: Dict[str, float] = field(default_factory=dict)
    iterations: int = 0
    diverged: bool = False
    backend: Optional[str] = None
    objective_value: Optional[float] = None
    attempts: List[Dict[str, object]] = field(default_factory=list)
    problem_name: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == SolveStatus.FEASIBLE

    def __getitem__(self, name: str):
        return self.values[name]

    def require_feasible(self, stage: str) -> "LmiSolution":
        if not self.feasible:
            raise InfeasibleError(f"{self.problem_name or stage}: status {self.status.value}, "
                                  f"worst violation {self.worst_violation:.3e}",
                                  solution=self, stage=stage,
                                  context={"status": self.status.value, "diverged": self.diverged,
                                           "worst_violation": self.worst_violation})
        return self

    def to_dict(self) -> Dict[str, object]:
        return {"status": self.status.value, "worst_violation": self.worst_violation,
                "violations": dict(self.violations), "iterations": self.iterations,
                "diverged": self.diverged, "backend": self.backend,
                "objective_value": self.objective_value, "attempts": list(self.attempts)}


def _backend_settings(backend: str, options: SolverOptions) -> Dict[str, object]:
    if backend == "CLARABEL":
        tight = min(options.tol, 1e-8)
        return {"max_iter": options.max_iter, "tol_gap_abs": tight, "tol_gap_rel": tight,
                "tol_feas": tight}
    if backend == "SCS":
        return {"max_iters": options.max_iter * 20, "eps": min(options.tol, 1e-9)}
    return {}


def _build(problem: LmiProblem, margin: float):
    cvx_vars: Dict[str, cp.Variable] = {}
    exprs: Dict[str, cp.Expression] = {}
    constraints = []
    for name, variable in problem.variables.items():
        if variable.is_scalar:
            var = cp.Variable(name=name)
            exprs[name] = var
        else:
            var = cp.Variable((variable.size, variable.size), symmetric=True, name=name)
            if variable.mask is not None:
                exprs[name] = cp.multiply(variable.mask.astype(float), var)
                free = (~variable.mask).astype(float)
                if free.any():
                    constraints.append(cp.multiply(free, var) == 0)
            else:
                exprs[name] = var
        cvx_vars[name] = var

    for constraint in problem.constraints:
        total = constraint.constant
        for term in constraint.terms:
            total = total + term.expression(exprs[term.variable.name])
        total = (total + total.T) / 2
        k = constraint.dim
        m = margin if constraint.margin is None else constraint.margin
        if constraint.sense == Sense.NSD:
            constraints.append(total << -m * np.eye(k))
        else:
            constraints.append(total >> m * np.eye(k))

    if problem.objective is None:
        objective = cp.Minimize(0)
    else:
        name, direction = problem.objective
        target = exprs[name] if problem.variables[name].is_scalar else cp.trace(exprs[name])
        objective = cp.Maximize(target) if direction == "max" else cp.Minimize(target)
    return cp.Problem(objective, constraints), exprs


def _attempt(problem: LmiProblem, options: SolverOptions, backend: str, margin: float) -> LmiSolution:
    cvx_problem, exprs = _build(problem, margin)
    try:
        cvx_problem.solve(solver=backend, **_backend_settings(backend, options))
    except cp.SolverError as exc:
        logger.debug(f"{problem.name}: {backend} failed: {exc}")
        return LmiSolution({}, SolveStatus.UNKNOWN, float("inf"), backend=backend,
                           problem_name=problem.name)

    status = cvx_problem.status
    iterations = int(getattr(cvx_problem.solver_stats, "num_iters", 0) or 0)
    if status == cp.INFEASIBLE:
        return LmiSolution({}, SolveStatus.INFEASIBLE_CERTIFIED, float("inf"), iterations=iterations,
                           backend=backend, problem_name=problem.name)
    if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        return LmiSolution({}, SolveStatus.UNKNOWN, float("inf"), iterations=iterations, diverged=True,
                           backend=backend, problem_name=problem.name)

    values: Dict[str, Union[float, np.ndarray]] = {}
    for name, variable in problem.variables.items():
        value = exprs[name].value
        if value is None:
            return LmiSolution({}, SolveStatus.UNKNOWN, float("inf"), iterations=iterations,
                               backend=backend, problem_name=problem.name)
        values[name] = float(value) if variable.is_scalar else sym(np.asarray(value, dtype=float))

    report = check(values, problem)
    accepted = all(
        report.violations[c.label] <= -(options.margin if c.margin is None else c.margin) + options.tol
        for c in problem.constraints)
    objective_value = None
    if problem.objective is not None:
        name = problem.objective[0]
        objective_value = float(values[name]) if problem.variables[name].is_scalar \
            else float(np.trace(values[name]))
    return LmiSolution(values, SolveStatus.FEASIBLE if accepted else SolveStatus.UNKNOWN,
                       report.worst, report.violations, iterations, backend=backend,
                       objective_value=objective_value, problem_name=problem.name)


def solve(problem: LmiProblem, options: Optional[SolverOptions] = None) -> LmiSolution:
    """
    Solve the problem and certify the result with the independent checker.

    The status is feasible only if every constraint passes the checker with
    slack >= margin - tol. An inconclusive attempt is retried with a tighter
    margin, then with the fallback backend.
    """
    options = options or SolverOptions()
    if not problem.constraints:
        raise PreconditionError(f"{problem.name}: no constraints")

    chain = [(RetryStrategy.NO_RETRY, options.backend, options.margin)]
    if options.retry:
        chain.append((RetryStrategy.TIGHTEN_MARGIN, options.backend, max(10 * options.margin, 1e-7)))
        if options.fallback_backend and options.fallback_backend != options.backend:
            chain.append((RetryStrategy.SWITCH_BACKEND, options.fallback_backend,
                          max(10 * options.margin, 1e-7)))

    attempts: List[Dict[str, object]] = []
    solution: Optional[LmiSolution] = None
    for step, backend, margin in chain:
        if step != RetryStrategy.NO_RETRY:
            logger.info(f"🔄 {problem.name}: retry ({step.value}, backend {backend}, margin {margin:g})")
        solution = _attempt(problem, options, backend, margin)
        attempts.append({"strategy": step.value, "backend": backend, "margin": margin,
                         "status": solution.status.value, "worst_violation": solution.worst_violation})
        if solution.status != SolveStatus.UNKNOWN or solution.diverged:
            break

    solution.attempts = attempts
    if solution.feasible:
        logger.info(f"✅ {problem.name}: feasible (worst violation {solution.worst_violation:.3e})")
    else:
        logger.warning(f"❌ {problem.name}: {solution.status.value}"
                       f"{' (objective diverged)' if solution.diverged else ''}")
    return solution


def maximize_trace(problem: LmiProblem, variable: Union[str, LmiVariable],
                   options: Optional[SolverOptions] = None) -> LmiSolution:
    name = variable if isinstance(variable, str) else variable.name
    if name not in problem.variables:
        raise PreconditionError(f"{name} is not a variable of {problem.name}")
    problem.set_objective(problem.variables[name], "max")
    return solve(problem, options)


def minimize_trace(problem: LmiProblem, variable: Union[str, LmiVariable],
                   options: Optional[SolverOptions] = None) -> LmiSolution:
    name = variable if isinstance(variable, str) else variable.name
    if name not in problem.variables:
        raise PreconditionError(f"{name} is not a variable of {problem.name}")
    problem.set_objective(problem.variables[name], "min")
    return solve(problem, options)
