"""
GD H-infinity Balancing
=======================

H-infinity Riccati inequalities on the vertex set, the constant lower bound
R_inf, the spectral condition, full and reduced observer-based controllers,
order selection by the weighted tail sum rho_r, gamma improvement and the
closed-loop gain bound of a reduced controller.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from balancing import BalancedRealization, BalancingKind, balance, contragredient, truncate
from error_handler import NumericalError, PreconditionError, handle_stage_error
from lmi import (AffineTerm, LmiProblem, Sense, SolverOptions, ViolationReport, cholesky_lower, is_spd,
                 lambda_max, lambda_min, minimize_trace, spd_inv, sym)
from lqgsyn import (Controller, ControllerKind, control_riccati_matrix, control_riccati_problem,
                    coprime_report, filter_riccati_problem, observer_controller, riccati_report,
                    solve_inverse_variable)
from sysmodel import AffineField, PlantModel, TruncatedField, VertexSet, check_oddness

logger = logging.getLogger(__name__)

RECHECK_TOLERANCE = 1e-6
STRICT_SLACK = 1e-9


def beta_of(gamma: float) -> float:
    """beta = sqrt(1 - gamma^-2), defined for gamma > 1"""
    if not gamma > 1.0 or not math.isfinite(gamma):
        raise PreconditionError(f"gamma must be a finite number > 1, got {gamma}")
    return math.sqrt(1.0 - gamma ** -2)


def control_matrices(vertices: Sequence[np.ndarray], plant: PlantModel, P: np.ndarray,
                     gamma: float) -> List[np.ndarray]:
    """M_i(P) = P A_i + A_i^T P - beta^2 P B B^T P + C^T C + eps P"""
    beta2 = beta_of(gamma) ** 2
    return [control_riccati_matrix(A, plant.B, plant.C, P, plant.epsilon, beta2) for A in vertices]


@dataclass
class HinfCertificate:
    gamma: float
    beta: float
    epsilon: float
    P: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    lambda_max: float
    spectral_ok: bool
    pi: np.ndarray
    report: ViolationReport
    vertices: Optional[VertexSet] = None
    injected: bool = False
    notes: List[str] = field(default_factory=list)

    @property
    def p_feasible(self) -> bool:
        return self._passed("P_inf > 0", "control[")

    @property
    def q_feasible(self) -> bool:
        return self._passed("Q_inf > 0", "filter[")

    def _passed(self, positivity: str, prefix: str) -> bool:
        limit = RECHECK_TOLERANCE * max(1.0, float(np.abs(self.P).max()) ** 2, float(np.abs(self.Q).max()) ** 2)
        return all(value <= limit for label, value in self.report.violations.items()
                   if label.startswith(prefix)) and self.report.violations.get(positivity, 0.0) < 0

    def to_dict(self) -> Dict[str, object]:
        return {"gamma": self.gamma, "beta": self.beta, "epsilon": self.epsilon,
                "P_inf": self.P.tolist(), "R_inf": self.R.tolist(), "Q_inf": self.Q.tolist(),
                "lambda_max_PQ": self.lambda_max, "spectral_condition": self.spectral_ok,
                "pi": self.pi.tolist(), "P_feasible": self.p_feasible, "Q_feasible": self.q_feasible,
                "worst_violation": self.report.worst, "violations": dict(self.report.violations),
                "injected": self.injected, "notes": list(self.notes)}


@handle_stage_error("P_inf")
def solve_pinf(plant: PlantModel, vertices: VertexSet, gamma: float,
               options: Optional[SolverOptions] = None) -> np.ndarray:
    """
    Largest-trace P_hat = P_inf^-1 of
    [A_i Ph + Ph A_i^T - beta^2 B B^T + eps Ph, Ph C^T; C Ph, -I] <= 0, Ph > 0.
    """
    beta2 = beta_of(gamma) ** 2
    problem = control_riccati_problem(vertices, plant.B, plant.C, plant.epsilon, beta2, name="P_hat_inf")
    solution = solve_inverse_variable(problem, "P_hat_inf", "max-trace", options, "P_inf")
    P = spd_inv(solution["P_hat_inf"], "P_hat_inf")
    report = riccati_report(vertices.vertices, plant.B, plant.C, P, None, plant.epsilon, beta2)
    logger.info(f"✅ P_inf (gamma = {gamma:g}), quadratic recheck worst violation {report.worst:.3e}")
    return P


@handle_stage_error("R_inf")
def compute_rinf(P: np.ndarray, plant: PlantModel, vertices: VertexSet, gamma: float,
                 options: Optional[SolverOptions] = None) -> np.ndarray:
    """
    Minimal-trace constant R >= 0 with R >= -M_i(P) at every vertex.

    Always succeeds: when the solver is inconclusive a scaled identity
    dominating every -M_i is used, and any residual violation is lifted away.
    """
    if vertices.one_sided:
        raise PreconditionError("R_inf needs a two-sided vertex set; one-sided clipping only "
                                "bounds '<= 0' inequalities")
    M = control_matrices(vertices.vertices, plant, P, gamma)
    n = plant.n
    problem = LmiProblem("R_inf")
    R_var = problem.add_variable("R_inf", n)
    problem.add_positive(R_var, margin=0.0)
    for i, M_i in enumerate(M):
        problem.add_constraint(M_i, [AffineTerm(R_var, np.eye(n), np.eye(n), symmetrize=False)],
                               Sense.PSD, f"R_inf + M[{i}] >= 0", margin=0.0)
    solution = minimize_trace(problem, R_var, options)
    if "R_inf" in solution.values:
        R = sym(solution["R_inf"])
    else:
        logger.warning("⚠️ R_inf solve inconclusive; using a scaled identity bound")
        R = max(0.0, max(-lambda_min(M_i) for M_i in M)) * np.eye(n)
    lift = max([0.0, -lambda_min(R)] + [-lambda_min(R + M_i) for M_i in M])
    if lift > 0:
        logger.debug(f"R_inf lifted by {lift:.3e}")
        R = R + lift * np.eye(n)
    return R


@handle_stage_error("Q_inf")
def solve_qinf(plant: PlantModel, vertices: VertexSet, gamma: float, R: np.ndarray,
               options: Optional[SolverOptions] = None) -> np.ndarray:
    """
    Largest-trace Q_hat = Q_inf^-1 of
    [Qh A_i + A_i^T Qh - beta^2 C^T C + eps Qh + gamma^-2 R, Qh B; B^T Qh, -I] <= 0, Qh > 0.
    """
    if lambda_min(R) < -1e-12:
        raise PreconditionError("R_inf must be positive semidefinite")
    beta2 = beta_of(gamma) ** 2
    problem = filter_riccati_problem(vertices, plant.B, plant.C, plant.epsilon, beta2, R, gamma,
                                     name="Q_hat_inf")
    solution = solve_inverse_variable(problem, "Q_hat_inf", "max-trace", options, "Q_inf")
    Q = spd_inv(solution["Q_hat_inf"], "Q_hat_inf")
    report = riccati_report(vertices.vertices, plant.B, plant.C, None, Q, plant.epsilon, beta2, R, gamma)
    logger.info(f"✅ Q_inf (gamma = {gamma:g}), quadratic recheck worst violation {report.worst:.3e}")
    return Q


def certificate_report(plant: PlantModel, vertices: VertexSet, gamma: float, P: np.ndarray,
                       R: np.ndarray, Q: np.ndarray) -> ViolationReport:
    beta2 = beta_of(gamma) ** 2
    report = riccati_report(vertices.vertices, plant.B, plant.C, P, Q, plant.epsilon, beta2, R, gamma)
    violations = {label.replace("P > 0", "P_inf > 0").replace("Q > 0", "Q_inf > 0"): value
                  for label, value in report.violations.items()}
    M = control_matrices(vertices.vertices, plant, P, gamma)
    violations["R_inf >= 0"] = -lambda_min(R)
    violations.update({f"R_inf bound[{i}]": -lambda_min(R + M_i) for i, M_i in enumerate(M)})
    worst_label = max(violations, key=violations.get)
    return ViolationReport(violations, violations[worst_label], worst_label)


def certify(plant: PlantModel, vertices: VertexSet, gamma: float, P: Optional[np.ndarray] = None,
            Q: Optional[np.ndarray] = None, options: Optional[SolverOptions] = None) -> HinfCertificate:
    """
    P_inf, R_inf, Q_inf and the spectral condition gamma^2 > lambda_max(P_inf Q_inf).

    Matrices passed in as P and Q are checked instead of solved for.
    """
    beta = beta_of(gamma)
    injected = P is not None or Q is not None
    notes = []
    if P is None:
        P = solve_pinf(plant, vertices, gamma, options)
    R = compute_rinf(P, plant, vertices, gamma, options)
    if Q is None:
        Q = solve_qinf(plant, vertices, gamma, R, options)
    if injected:
        notes.append("P_inf/Q_inf supplied externally; checked, not solved")

    lam = lambda_max(sym(spd_sqrt_product(P, Q)))
    spectral_ok = gamma ** 2 > lam
    _, pi = contragredient(P, Q)
    report = certificate_report(plant, vertices, gamma, P, R, Q)
    if not spectral_ok:
        notes.append(f"spectral condition unmet: lambda_max(P_inf Q_inf) = {lam:.6g} >= gamma^2 = {gamma ** 2:.6g}")
        logger.warning(f"⚠️ {notes[-1]}")
    cert = HinfCertificate(gamma, beta, plant.epsilon, P, R, Q, lam, spectral_ok, pi, report,
                           vertices, injected, notes)
    logger.info(f"{'✅' if spectral_ok else '⚠️'} H-inf certificate gamma = {gamma:g}: "
                f"pi = {np.array2string(pi, precision=4)}, worst violation {report.worst:.3e}")
    return cert


def spd_sqrt_product(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """L^T Q L with P = L L^T; same spectrum as P Q"""
    L = cholesky_lower(P, "P_inf")
    return L.T @ Q @ L


def hinf_balance(plant: PlantModel, cert: HinfCertificate) -> BalancedRealization:
    """Coordinates with P_inf = Q_inf = Pi"""
    return balance(plant, cert.vertices, cert.Q, cert.P, BalancingKind.HINF)


def build_hinf_rcr(plant: PlantModel, P: np.ndarray, gamma: float) -> PlantModel:
    """dx/dt = f(x) - beta^2 B B^T P x + B v, (beta y; u) = (beta C x; -beta^2 B^T P x) + (0; v)"""
    beta = beta_of(gamma)
    K = beta ** 2 * plant.B.T @ P
    C_rcr = np.vstack([beta * plant.C, -K])
    D_rcr = np.vstack([np.zeros((plant.p, plant.m)), np.eye(plant.m)])
    return PlantModel(AffineField(plant.field, -plant.B @ K), plant.B, C_rcr, plant.epsilon,
                      f"{plant.name}_hinf_rcr", D=D_rcr)


def hinf_rcr_gramians(P: np.ndarray, Q: np.ndarray, gamma: float) -> Tuple[np.ndarray, np.ndarray]:
    """((beta^2 P + Q^-1)^-1, beta^2 P)"""
    beta2 = beta_of(gamma) ** 2
    return spd_inv(beta2 * P + spd_inv(Q, "Q_inf"), "beta^2 P + Q^-1"), beta2 * np.asarray(P, dtype=float)


def hinf_rcr_report(plant: PlantModel, vertices: VertexSet, cert: HinfCertificate) -> ViolationReport:
    rcr = build_hinf_rcr(plant, cert.P, cert.gamma)
    X, Y = hinf_rcr_gramians(cert.P, cert.Q, cert.gamma)
    return coprime_report(rcr, vertices, -cert.beta ** 2 * plant.B @ plant.B.T @ cert.P, X, Y)


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------

def synthesize_controller(plant: PlantModel, cert: HinfCertificate, override: bool = False) -> Controller:
    """
    dx_c/dt = f(x_c) - beta^2 B B^T P x_c - (Q^-1 - gamma^-2 P)^-1 C^T (C x_c - y),
    u = -B^T P x_c.
    """
    notes = []
    if not cert.spectral_ok:
        if not override:
            raise PreconditionError(f"spectral condition gamma^2 > lambda_max(P_inf Q_inf) fails "
                                    f"({cert.gamma ** 2:.6g} <= {cert.lambda_max:.6g}); pass override "
                                    f"to build the controller anyway", stage="controller")
        notes.append("built with spectral-condition override: not certified")
        logger.warning("⚠️ Building the H-inf controller despite the spectral condition (override)")
    S = spd_inv(cert.Q, "Q_inf") - cert.P / cert.gamma ** 2
    if not is_spd(S):
        notes.append("Q_inf^-1 - gamma^-2 P_inf is not positive definite")
    try:
        L = scipy.linalg.solve(sym(S), plant.C.T, assume_a="sym")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"observer gain matrix is singular: {exc}", stage="controller")
    K = plant.B.T @ cert.P
    certified = cert.spectral_ok and cert.p_feasible and cert.q_feasible and cert.epsilon > 0
    if cert.epsilon <= 0:
        notes.append("GES not certified: requires eps > 0")
    return observer_controller(ControllerKind.HINF, plant.field, plant.B, plant.C, K, L,
                               cert.beta ** 2 * plant.B @ K, certified, notes)


def rho(pi: Sequence[float], r: int, beta: float) -> float:
    """rho_r = 2 * sum_{i>r} beta pi_i / sqrt(1 + beta^2 pi_i^2)"""
    pi = np.asarray(pi, dtype=float)
    if not 0 <= r <= len(pi):
        raise PreconditionError(f"order {r} outside 0..{len(pi)}")
    tail = beta * pi[r:]
    return 2.0 * float(np.sum(tail / np.sqrt(1.0 + tail ** 2)))


def select_order(pi: Sequence[float], gamma: float) -> Tuple[int, bool]:
    """
    Smallest r with rho_r (1 + gamma / beta) < 1.

    Returns (r, found); when no r < n qualifies, (n, False).
    """
    beta = beta_of(gamma)
    n = len(pi)
    factor = 1.0 + gamma / beta
    for r in range(1, n):
        if rho(pi, r, beta) * factor < 1.0:
            return r, True
    return n, False


def gain_bound(gamma: float, rho_r: float) -> Optional[float]:
    """beta^-1 (beta gamma + rho (gamma + beta)) / (beta - rho (gamma + beta)), None when undefined"""
    beta = beta_of(gamma)
    denominator = beta - rho_r * (gamma + beta)
    if denominator <= 0:
        return None
    return (beta * gamma + rho_r * (gamma + beta)) / (beta * denominator)


@dataclass
class ConditionReport:
    """Pass/fail of every hypothesis behind the reduced controller's guarantees"""
    r: int
    items: Dict[str, bool]
    details: Dict[str, str]
    rho: float
    gain_bound: Optional[float]
    ges_certified: bool

    def to_dict(self) -> Dict[str, object]:
        return {"r": self.r, "items": dict(self.items), "details": dict(self.details), "rho": self.rho,
                "gain_bound": self.gain_bound, "ges_certified": self.ges_certified}

    def lines(self) -> List[str]:
        rows = [f"reduced controller r = {self.r}"]
        rows.extend(f"  item {key}: {'pass' if ok else 'FAIL'} ({self.details[key]})"
                    for key, ok in self.items.items())
        bound = "undefined" if self.gain_bound is None else f"{self.gain_bound:.6g}"
        rows.append(f"  rho_r = {self.rho:.6g}, closed-loop gain bound {bound}")
        rows.append(f"  GES certified: {'yes' if self.ges_certified else 'no'}")
        return rows


def condition_report(plant: PlantModel, cert: HinfCertificate, r: int, seed: int = 0) -> ConditionReport:
    beta = cert.beta
    pi = cert.pi
    n = len(pi)
    items: Dict[str, bool] = {}
    details: Dict[str, str] = {}
    items["I"] = cert.p_feasible and cert.q_feasible and cert.spectral_ok
    details["I"] = (f"P_inf feasible {cert.p_feasible}, Q_inf feasible {cert.q_feasible}, "
                    f"gamma^2 = {cert.gamma ** 2:.6g} vs lambda_max = {cert.lambda_max:.6g}")
    items["II"] = r == n or pi[r - 1] > pi[r]
    details["II"] = "r = n" if r == n else f"pi_r = {pi[r - 1]:.6g}, pi_(r+1) = {pi[r]:.6g}"
    oddness = check_oddness(plant, seed=seed)
    items["III"] = oddness.passed
    details["III"] = f"oddness residual {oddness.residual:.3e}"
    rho_r = rho(pi, r, beta)
    factor = 1.0 + cert.gamma / beta
    items["IV"] = rho_r * factor < 1.0
    details["IV"] = f"rho_r (1 + gamma/beta) = {rho_r * factor:.6g}"
    bound = gain_bound(cert.gamma, rho_r)
    return ConditionReport(r, items, details, rho_r, bound, all(items.values()) and cert.epsilon > 0)


def hinf_closure_report(balanced: BalancedRealization, cert: HinfCertificate, r: int) -> ViolationReport:
    """Pi_1 against the truncated H-inf inequalities with the (1,1) block of the balanced R_inf"""
    reduced = truncate(balanced, r)
    R_balanced = balanced.T_inv.T @ cert.R @ balanced.T_inv
    Pi1 = np.diag(balanced.sigma[:r])
    return riccati_report(reduced.vertices.vertices, reduced.plant.B, reduced.plant.C, Pi1, Pi1,
                          cert.epsilon, cert.beta ** 2, sym(R_balanced[:r, :r]), cert.gamma)


@handle_stage_error("reduce_controller")
def reduce_controller(plant: PlantModel, cert: HinfCertificate, r: int, seed: int = 0,
                      balanced: Optional[BalancedRealization] = None) -> Tuple[Controller, ConditionReport]:
    """
    Reduced controller from the H-inf-balanced truncation:
    dx/dt = f1(x, 0) - beta^2 B1 B1^T Pi1 x - (Pi1^-1 - gamma^-2 Pi1)^-1 C1^T (C1 x - y),
    u = -B1^T Pi1 x.
    """
    balanced = balanced or hinf_balance(plant, cert)
    reduced = truncate(balanced, r)
    pi1 = balanced.sigma[:r]
    S1 = 1.0 / pi1 - pi1 / cert.gamma ** 2
    if np.any(np.abs(S1) < 1e-14):
        raise NumericalError(f"pi_i = gamma for some i <= {r}: reduced observer gain undefined")
    Pi1 = np.diag(pi1)
    B1, C1 = reduced.plant.B, reduced.plant.C
    K = B1.T @ Pi1
    L = (C1 / S1).T
    report = condition_report(plant, cert, r, seed)
    notes = []
    if np.any(S1 < 0):
        notes.append("Pi1^-1 - gamma^-2 Pi1 is indefinite: observer gain changes sign")
    if not report.ges_certified:
        failed = [key for key, ok in report.items.items() if not ok]
        notes.append(f"GES not certified (failed items: {', '.join(failed) or 'eps = 0'})")
    controller = observer_controller(ControllerKind.HINF_REDUCED, TruncatedField(balanced.plant.field, r),
                                     B1, C1, K, L, cert.beta ** 2 * B1 @ K, report.ges_certified, notes)
    controller.T = balanced.T
    logger.info(f"{'✅' if report.ges_certified else '⚠️'} reduced H-inf controller r = {r}, "
                f"rho_r = {report.rho:.4g}")
    return controller, report


# ---------------------------------------------------------------------------
# Gamma improvement
# ---------------------------------------------------------------------------

@dataclass
class GammaImprovement:
    alpha: float
    eps2: float
    gamma: float
    gamma_bar: float
    notes: List[str] = field(default_factory=list)

    @property
    def beta_bar(self) -> float:
        return beta_of(self.gamma_bar)

    def to_dict(self) -> Dict[str, object]:
        return {"alpha": self.alpha, "eps2": self.eps2, "gamma": self.gamma,
                "gamma_bar": self.gamma_bar, "notes": list(self.notes)}


def improve_gamma(cert: HinfCertificate, plant: PlantModel) -> GammaImprovement:
    """
    Largest alpha with alpha P B B^T P <= eps2 P, alpha Q C^T C Q <= eps2 Q,
    alpha <= beta^2 - delta, 2 eps2 <= eps - delta; gamma_bar = gamma / sqrt(1 + alpha gamma^2).

    alpha P B B^T P <= eps2 P holds iff alpha lambda_max(B^T P B) <= eps2, so the
    optimum is eps2 = (eps - delta) / 2 with alpha capped by both spectra.
    """
    epsilon = cert.epsilon
    if epsilon <= STRICT_SLACK:
        raise PreconditionError("gamma improvement needs eps > 0")
    eps2 = 0.5 * (epsilon - STRICT_SLACK)
    caps = [cert.beta ** 2 - STRICT_SLACK]
    for label, gain in (("alpha_P", plant.B.T @ cert.P @ plant.B), ("alpha_Q", plant.C @ cert.Q @ plant.C.T)):
        top = lambda_max(sym(gain))
        if top > 0:
            caps.append(eps2 / top)
            logger.debug(f"{label}: alpha <= {caps[-1]:.6g}")
    alpha = max(0.0, min(caps))
    notes = []
    if alpha == 0.0:
        notes.append("alpha* = 0: gamma cannot be improved")
    gamma_bar = cert.gamma / math.sqrt(1.0 + alpha * cert.gamma ** 2)
    logger.info(f"✅ gamma improvement: alpha = {alpha:.6g}, eps2 = {eps2:.6g}, gamma_bar = {gamma_bar:.6g}")
    return GammaImprovement(alpha, eps2, cert.gamma, gamma_bar, notes)


def recertify(plant: PlantModel, vertices: VertexSet, improvement: GammaImprovement,
              gamma: Optional[float] = None, options: Optional[SolverOptions] = None) -> HinfCertificate:
    """
    Solve the H-inf Riccati inequalities again at the improved gamma.

    gamma defaults to gamma_bar. Values below gamma_bar are not covered by the
    improvement and are refused.
    """
    gamma = improvement.gamma_bar if gamma is None else float(gamma)
    if gamma < improvement.gamma_bar * (1.0 - 1e-12):
        raise PreconditionError(f"gamma = {gamma:.6g} is below the improved bound gamma_bar = "
                                f"{improvement.gamma_bar:.6g}", stage="recertify")
    return certify(plant, vertices, gamma, options=options)


@dataclass
class HinfDesign:
    cert: HinfCertificate
    controller: Controller
    rcr_report: ViolationReport
    order: int
    order_found: bool
    reduced: Dict[int, Tuple[Controller, ConditionReport]] = field(default_factory=dict)
    improvement: Optional[GammaImprovement] = None
    recertified: Optional[HinfCertificate] = None
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        data = {"certificate": self.cert.to_dict(), "controller": self.controller.to_dict(),
                "rcr_worst_violation": self.rcr_report.worst,
                "selected_order": self.order, "order_found": self.order_found,
                "rho_table": [{"r": r, "rho": rho(self.cert.pi, r, self.cert.beta)}
                              for r in range(1, len(self.cert.pi) + 1)],
                "reduced_controllers": {str(r): {"controller": c.to_dict(), "conditions": rep.to_dict()}
                                        for r, (c, rep) in sorted(self.reduced.items())},
                "notes": list(self.notes)}
        if self.improvement is not None:
            data["improvement"] = self.improvement.to_dict()
        if self.recertified is not None:
            data["recertified"] = self.recertified.to_dict()
        return data


def hinf_design(plant: PlantModel, vertices: VertexSet, gamma: float, orders: Sequence[int] = (),
                P: Optional[np.ndarray] = None, Q: Optional[np.ndarray] = None, override: bool = False,
                improve: bool = False, options: Optional[SolverOptions] = None, seed: int = 0) -> HinfDesign:
    """Certificate, full controller, order selection and the requested reduced controllers"""
    cert = certify(plant, vertices, gamma, P, Q, options)
    controller = synthesize_controller(plant, cert, override)
    order, found = select_order(cert.pi, gamma)
    design = HinfDesign(cert, controller, hinf_rcr_report(plant, vertices, cert), order, found)
    if not found:
        design.notes.append("no reduced order satisfies rho_r (1 + gamma/beta) < 1")
    balanced = hinf_balance(plant, cert)
    for r in sorted(set(orders) | ({order} if order < plant.n else set())):
        if r < plant.n:
            design.reduced[r] = reduce_controller(plant, cert, r, seed, balanced)
    if improve:
        design.improvement = improve_gamma(cert, plant)
        if design.improvement.gamma_bar < gamma and design.improvement.gamma_bar > 1:
            try:
                design.recertified = recertify(plant, vertices, design.improvement, options=options)
            except Exception as exc:
                design.notes.append(f"recertification at gamma_bar failed: {exc}")
                logger.warning(f"⚠️ {design.notes[-1]}")
    return design
