"""
GD LQG Balancing
================

GD control/filter Riccati inequalities (solved in Schur form on the inverse
variables), LQG balancing, right/left coprime representations, the observer
and the observer-based dynamic controller.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from balancing import BalancedRealization, BalancingKind, balance, truncate
from error_handler import DimensionError, PreconditionError, handle_stage_error
from gdreduce import lyapunov_report
from lmi import (LmiProblem, LmiSolution, Sense, SolverOptions, ViolationReport, check_matrices,
                 is_spd, maximize_trace, schur_constraint, solve, spd_inv, sym)
from sysmodel import AffineField, PlantModel, TruncatedField, VectorField, VertexSet

logger = logging.getLogger(__name__)

RECHECK_TOLERANCE = 1e-7


def control_riccati_matrix(A: np.ndarray, B: np.ndarray, C: np.ndarray, P: np.ndarray,
                           epsilon: float, beta2: float = 1.0) -> np.ndarray:
    """P A + A^T P - beta^2 P B B^T P + C^T C + eps P"""
    return sym(P @ A + A.T @ P - beta2 * P @ B @ B.T @ P + C.T @ C + epsilon * P)


def filter_riccati_matrix(A: np.ndarray, B: np.ndarray, C: np.ndarray, Q: np.ndarray,
                          epsilon: float, beta2: float = 1.0,
                          R: Optional[np.ndarray] = None, gamma: Optional[float] = None) -> np.ndarray:
    """A Q + Q A^T - beta^2 Q C^T C Q + B B^T + eps Q (+ gamma^-2 Q R Q)"""
    M = A @ Q + Q @ A.T - beta2 * Q @ C.T @ C @ Q + B @ B.T + epsilon * Q
    if R is not None:
        M = M + Q @ R @ Q / gamma ** 2
    return sym(M)


def riccati_report(vertices: Sequence[np.ndarray], B: np.ndarray, C: np.ndarray,
                   P: Optional[np.ndarray], Q: Optional[np.ndarray], epsilon: float,
                   beta2: float = 1.0, R: Optional[np.ndarray] = None,
                   gamma: Optional[float] = None) -> ViolationReport:
    """Quadratic-form check of the control (P) and filter (Q) inequalities at every vertex"""
    named = []
    if P is not None:
        named.append(("P > 0", P, Sense.PSD))
        named.extend((f"control[{i}]", control_riccati_matrix(A, B, C, P, epsilon, beta2), Sense.NSD)
                     for i, A in enumerate(vertices))
    if Q is not None:
        named.append(("Q > 0", Q, Sense.PSD))
        named.extend((f"filter[{i}]", filter_riccati_matrix(A, B, C, Q, epsilon, beta2, R, gamma), Sense.NSD)
                     for i, A in enumerate(vertices))
    return check_matrices(named)


def control_riccati_problem(vertices: VertexSet, B: np.ndarray, C: np.ndarray, epsilon: float,
                            beta2: float = 1.0, mask: Optional[np.ndarray] = None,
                            name: str = "P_hat") -> LmiProblem:
    """
    [A_i Ph + Ph A_i^T - beta^2 B B^T + eps Ph,  Ph C^T]
    [C Ph,                                        -I   ]  <= 0,   Ph > 0
    """
    problem = LmiProblem(name)
    Ph = problem.add_variable(name, vertices.n, mask=mask)
    problem.add_positive(Ph)
    for i, A in enumerate(vertices):
        schur_constraint(problem, Ph, A, epsilon, -beta2 * B @ B.T, C.T, f"{name}[{i}]")
    return problem


def filter_riccati_problem(vertices: VertexSet, B: np.ndarray, C: np.ndarray, epsilon: float,
                           beta2: float = 1.0, R: Optional[np.ndarray] = None,
                           gamma: Optional[float] = None, mask: Optional[np.ndarray] = None,
                           name: str = "Q_hat") -> LmiProblem:
    """
    [Qh A_i + A_i^T Qh - beta^2 C^T C + eps Qh (+ gamma^-2 R),  Qh B]
    [B^T Qh,                                                    -I  ]  <= 0,   Qh > 0
    """
    problem = LmiProblem(name)
    Qh = problem.add_variable(name, vertices.n, mask=mask)
    problem.add_positive(Qh)
    upper_left = -beta2 * C.T @ C
    if R is not None:
        upper_left = upper_left + R / gamma ** 2
    for i, A in enumerate(vertices):
        schur_constraint(problem, Qh, A.T, epsilon, upper_left, B, f"{name}[{i}]")
    return problem


def solve_inverse_variable(problem: LmiProblem, name: str, objective: str,
                           options: Optional[SolverOptions], stage: str) -> LmiSolution:
    """Solve for an inverse variable; a diverging trace objective falls back to plain feasibility"""
    if objective == "max-trace":
        solution = maximize_trace(problem, name, options)
        if solution.diverged:
            logger.warning(f"⚠️ trace of {name} is unbounded; using a feasible point instead")
            problem.objective = None
            solution = solve(problem, options)
    else:
        solution = solve(problem, options)
    return solution.require_feasible(stage)


@dataclass
class RiccatiPair:
    P: np.ndarray
    Q: np.ndarray
    epsilon: float
    report: ViolationReport
    solutions: Dict[str, LmiSolution] = field(default_factory=dict)

    @property
    def worst_violation(self) -> float:
        return self.report.worst

    def to_dict(self) -> Dict[str, object]:
        return {"epsilon": self.epsilon, "P": self.P.tolist(), "Q": self.Q.tolist(),
                "worst_violation": self.report.worst, "violations": dict(self.report.violations),
                "solver": {name: s.to_dict() for name, s in self.solutions.items()}}


@handle_stage_error("riccati")
def solve_gd_riccati(plant: PlantModel, vertices: VertexSet, objective: str = "none",
                     mask: Optional[np.ndarray] = None,
                     options: Optional[SolverOptions] = None) -> RiccatiPair:
    """
    Solve the GD control and filter Riccati inequalities on the vertex set.

    The LMIs are solved for P^-1 and Q^-1; the results are inverted and
    rechecked in the original quadratic form at every vertex.
    """
    if vertices.n != plant.n:
        raise DimensionError(f"vertices are {vertices.n} x {vertices.n}, plant has n = {plant.n}")
    if vertices.one_sided:
        logger.warning("⚠️ One-sided vertex clipping is not valid for Riccati inequalities with "
                       "indefinite terms; results hold at the vertices only")
    epsilon = plant.epsilon
    control = control_riccati_problem(vertices, plant.B, plant.C, epsilon, mask=mask)
    filter_ = filter_riccati_problem(vertices, plant.B, plant.C, epsilon, mask=mask)
    solutions = {"P_hat": solve_inverse_variable(control, "P_hat", objective, options, "riccati"),
                 "Q_hat": solve_inverse_variable(filter_, "Q_hat", objective, options, "riccati")}
    P = spd_inv(solutions["P_hat"]["P_hat"], "P_hat")
    Q = spd_inv(solutions["Q_hat"]["Q_hat"], "Q_hat")
    report = riccati_report(vertices.vertices, plant.B, plant.C, P, Q, epsilon)
    if report.worst > RECHECK_TOLERANCE * max(1.0, np.abs(P).max() ** 2, np.abs(Q).max() ** 2):
        logger.warning(f"⚠️ Quadratic-form recheck violation {report.worst:.3e} at {report.worst_label}")
    else:
        logger.info(f"✅ GD Riccati pair, quadratic recheck worst violation {report.worst:.3e}")
    return RiccatiPair(P, Q, epsilon, report, solutions)


@handle_stage_error("lqg_balance")
def lqg_balance(plant: PlantModel, vertices: Optional[VertexSet], pair: RiccatiPair) -> BalancedRealization:
    """
    Coordinates with P = Q = Pi. Q plays the controllability role (Q -> T Q T^T)
    and P the observability role (P -> T^-T P T^-1).
    """
    return balance(plant, vertices, pair.Q, pair.P, BalancingKind.LQG)


def lqg_closure_report(balanced: BalancedRealization, r: int) -> ViolationReport:
    """Pi_1 against the Riccati inequalities of the truncated model"""
    reduced = truncate(balanced, r)
    Pi1 = np.diag(balanced.sigma[:r])
    return riccati_report(reduced.vertices.vertices, reduced.plant.B, reduced.plant.C, Pi1, Pi1,
                          balanced.plant.epsilon)


def lqg_bound(pi: Sequence[float], r: int) -> float:
    """2 * sum_{i>r} pi_i / sqrt(1 + pi_i^2), balanced truncation bound of the coprime representation"""
    pi = np.asarray(pi, dtype=float)[r:]
    return 2.0 * float(np.sum(pi / np.sqrt(1.0 + pi ** 2)))


# ---------------------------------------------------------------------------
# Coprime representations and observer
# ---------------------------------------------------------------------------

def build_rcr(plant: PlantModel, P: np.ndarray) -> PlantModel:
    """dx/dt = f(x) - B B^T P x + B v, (y; u) = (C x; -B^T P x) + (0; v)"""
    K = plant.B.T @ P
    C_rcr = np.vstack([plant.C, -K])
    D_rcr = np.vstack([np.zeros((plant.p, plant.m)), np.eye(plant.m)])
    return PlantModel(AffineField(plant.field, -plant.B @ K), plant.B, C_rcr, plant.epsilon,
                      f"{plant.name}_rcr", D=D_rcr)


def rcr_gramians(P: np.ndarray, Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Controllability and observability Gramians of the RCR: ((P + Q^-1)^-1, P)"""
    return spd_inv(P + spd_inv(Q, "Q"), "P + Q^-1"), np.array(P, dtype=float)


def build_lcr(plant: PlantModel, Q: np.ndarray) -> PlantModel:
    """dx/dt = f(x) - Q C^T C x + [B, Q C^T] (u; y), z = C x + [0, -I] (u; y)"""
    L = Q @ plant.C.T
    B_lcr = np.hstack([plant.B, L])
    D_lcr = np.hstack([np.zeros((plant.p, plant.m)), -np.eye(plant.p)])
    return PlantModel(AffineField(plant.field, -L @ plant.C), B_lcr, plant.C, plant.epsilon,
                      f"{plant.name}_lcr", D=D_lcr)


def lcr_gramians(P: np.ndarray, Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Controllability and observability Gramians of the LCR: (Q, (Q + P^-1)^-1)"""
    return np.array(Q, dtype=float), spd_inv(Q + spd_inv(P, "P"), "Q + P^-1")


def coprime_report(coprime: PlantModel, vertices: VertexSet, feedback: np.ndarray,
                   X: np.ndarray, Y: np.ndarray) -> ViolationReport:
    """GD Lyapunov check of a coprime representation on the feedback-shifted vertices"""
    shifted = vertices.shifted(feedback)
    return lyapunov_report(shifted.vertices, coprime.B, coprime.C, X, Y, coprime.epsilon)


@dataclass
class Observer:
    """dx_hat/dt = f(x_hat) - L C x_hat + B u + L y"""
    field: VectorField
    B: np.ndarray
    C: np.ndarray
    L: np.ndarray

    @property
    def n(self) -> int:
        return self.field.n

    def dynamics(self, x_hat: np.ndarray, u: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (self.field.evaluate(x_hat) - self.L @ (self.C @ x_hat) + self.B @ u + self.L @ y)


def build_observer(plant: PlantModel, Q: np.ndarray) -> Observer:
    if not is_spd(Q):
        raise PreconditionError("observer gain requires a symmetric positive definite Q")
    return Observer(plant.field, plant.B, plant.C, Q @ plant.C.T)


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------

class ControllerKind(Enum):
    LQG = "lqg"
    LQG_REDUCED = "lqg-reduced"
    HINF = "hinf"
    HINF_REDUCED = "hinf-reduced"


@dataclass
class Controller:
    """
    Dynamic output feedback  dx_c/dt = f_c(x_c) + A_c x_c + L_c y,  u = -K_c x_c.

    f_c is the plant field (full order) or its balanced truncation (reduced).
    """
    kind: ControllerKind
    field: VectorField
    A_c: np.ndarray
    L_c: np.ndarray
    K_c: np.ndarray
    certified: bool = False
    notes: List[str] = field(default_factory=list)
    T: Optional[np.ndarray] = None  # balancing transform of a reduced controller

    def __post_init__(self):
        k = self.field.n
        if self.A_c.shape != (k, k) or self.L_c.shape[0] != k or self.K_c.shape[1] != k:
            raise DimensionError(f"controller matrices do not match order {k}")

    @property
    def order(self) -> int:
        return self.field.n

    @property
    def p(self) -> int:
        return self.L_c.shape[1]

    @property
    def m(self) -> int:
        return self.K_c.shape[0]

    def dynamics(self, x_c: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.field.evaluate(x_c) + self.A_c @ x_c + self.L_c @ y

    def output(self, x_c: np.ndarray) -> np.ndarray:
        return -self.K_c @ x_c

    def check_plant(self, plant: PlantModel):
        if plant.p != self.p or plant.m != self.m:
            raise DimensionError(f"controller (p={self.p}, m={self.m}) does not fit plant "
                                 f"(p={plant.p}, m={plant.m})")

    def to_dict(self) -> Dict[str, object]:
        return {"kind": self.kind.value, "order": self.order, "A_c": self.A_c.tolist(),
                "L_c": self.L_c.tolist(), "K_c": self.K_c.tolist(), "certified": self.certified,
                "notes": list(self.notes)}


def observer_controller(kind: ControllerKind, field_: VectorField, B: np.ndarray, C: np.ndarray,
                        K: np.ndarray, L: np.ndarray, feedback: np.ndarray,
                        certified: bool, notes: List[str]) -> Controller:
    """dx_c/dt = f(x_c) - feedback x_c - L (C x_c - y), u = -K x_c"""
    return Controller(kind, field_, -feedback - L @ C, L, K, certified, notes)


def build_lqg_controller(plant: PlantModel, P: np.ndarray, Q: np.ndarray) -> Controller:
    """
    Observer-based controller dx_c/dt = f(x_c) + B u - Q C^T (C x_c - y), u = -B^T P x_c.
    Closed-loop GES is certified for eps > 0.
    """
    if P.shape != (plant.n, plant.n) or Q.shape != (plant.n, plant.n):
        raise DimensionError("P and Q must be n x n")
    K = plant.B.T @ P
    L = Q @ plant.C.T
    notes = []
    certified = plant.epsilon > 0
    if not certified:
        notes.append("GES not certified: requires eps > 0")
        logger.warning("⚠️ LQG controller built with eps = 0: GES not certified")
    return observer_controller(ControllerKind.LQG, plant.field, plant.B, plant.C, K, L,
                               plant.B @ K, certified, notes)


def build_reduced_lqg_controller(balanced: BalancedRealization, r: int) -> Controller:
    """
    Truncated LQG controller from LQG-balanced coordinates:
    dx/dt = f1(x, 0) + B1 u - Pi1 C1^T (C1 x - y), u = -B1^T Pi1 x.
    Stability with the full-order plant is not certified.
    """
    if balanced.kind != BalancingKind.LQG:
        raise PreconditionError("reduced LQG controller needs an LQG-balanced realization")
    reduced = truncate(balanced, r)
    Pi1 = np.diag(balanced.sigma[:r])
    B1, C1 = reduced.plant.B, reduced.plant.C
    K = B1.T @ Pi1
    L = Pi1 @ C1.T
    controller = observer_controller(ControllerKind.LQG_REDUCED, TruncatedField(balanced.plant.field, r),
                                     B1, C1, K, L, B1 @ K, False,
                                     ["stability with the full-order plant NOT certified"])
    controller.T = balanced.T
    return controller


@dataclass
class LqgDesign:
    """Everything the LQG pipeline produces for one plant"""
    pair: RiccatiPair
    balanced: BalancedRealization
    controller: Controller
    rcr_report: ViolationReport
    lcr_report: ViolationReport
    reduced_controller: Optional[Controller] = None
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        data = {"riccati": self.pair.to_dict(), "balanced": self.balanced.to_dict(),
                "controller": self.controller.to_dict(),
                "rcr_worst_violation": self.rcr_report.worst,
                "lcr_worst_violation": self.lcr_report.worst,
                "bound_table": [{"r": r, "bound": lqg_bound(self.balanced.sigma, r)}
                                for r in range(1, self.balanced.n + 1)],
                "notes": list(self.notes)}
        if self.reduced_controller is not None:
            data["reduced_controller"] = self.reduced_controller.to_dict()
        return data


def lqg_design(plant: PlantModel, vertices: VertexSet, r: Optional[int] = None,
               objective: str = "none", mask: Optional[np.ndarray] = None,
               options: Optional[SolverOptions] = None) -> LqgDesign:
    """Riccati pair, coprime Gramian checks, LQG balancing and controllers"""
    pair = solve_gd_riccati(plant, vertices, objective, mask, options)
    K = plant.B.T @ pair.P
    L = pair.Q @ plant.C.T
    X_rcr, Y_rcr = rcr_gramians(pair.P, pair.Q)
    rcr_report = coprime_report(build_rcr(plant, pair.P), vertices, -plant.B @ K, X_rcr, Y_rcr)
    X_lcr, Y_lcr = lcr_gramians(pair.P, pair.Q)
    lcr_report = coprime_report(build_lcr(plant, pair.Q), vertices, -L @ plant.C, X_lcr, Y_lcr)
    balanced = lqg_balance(plant, vertices, pair)
    design = LqgDesign(pair, balanced, build_lqg_controller(plant, pair.P, pair.Q), rcr_report, lcr_report)
    if r is not None and r < plant.n:
        design.reduced_controller = build_reduced_lqg_controller(balanced, r)
        design.notes.append(f"reduced LQG controller of order {r} is not certified for the full plant")
    return design
