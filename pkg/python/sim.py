"""
Simulation and Property Verification
====================================

Fixed-step RK4 integration of plants, reduced models, observers and closed
loops, trajectory export, and randomized verifiers for the stability, decay,
error-bound and gain claims the other modules certify.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from error_handler import DimensionError, PreconditionError, handle_stage_error
from lmi import spd_inv
from lqgsyn import Controller, Observer
from sysmodel import PlantModel, VectorField, check_oddness

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e9
MAX_WORKERS = 4


# ---------------------------------------------------------------------------
# Signals
# ---------------------------------------------------------------------------

class SignalKind(Enum):
    ZERO = "zero"
    CONSTANT = "constant"
    SINES = "sines"
    TABLE = "table"


@dataclass(frozen=True)
class Signal:
    """
    Input or disturbance signal of a given dimension.

    sines: direction * sum_k a_k sin(w_k t + phi_k)
    table: piecewise constant, value rows held from each breakpoint on
    """
    kind: SignalKind
    dimension: int
    values: Tuple[float, ...] = ()
    amplitudes: Tuple[float, ...] = ()
    frequencies: Tuple[float, ...] = ()
    phases: Tuple[float, ...] = ()
    times: Tuple[float, ...] = ()
    rows: Tuple[Tuple[float, ...], ...] = ()

    def __post_init__(self):
        if self.dimension < 0:
            raise DimensionError(f"signal dimension must be nonnegative, got {self.dimension}")
        if self.kind == SignalKind.CONSTANT and len(self.values) != self.dimension:
            raise DimensionError(f"constant signal has {len(self.values)} values, dimension {self.dimension}")
        if self.kind == SignalKind.SINES:
            if len(self.amplitudes) != len(self.frequencies):
                raise DimensionError("sines need as many amplitudes as frequencies")
            if self.phases and len(self.phases) != len(self.amplitudes):
                raise DimensionError("sines need one phase per amplitude")
            if self.values and len(self.values) != self.dimension:
                raise DimensionError(f"sine direction has {len(self.values)} entries, dimension {self.dimension}")
        if self.kind == SignalKind.TABLE:
            if not self.times or len(self.times) != len(self.rows):
                raise DimensionError("table signal needs one value row per breakpoint")
            if any(b <= a for a, b in zip(self.times, self.times[1:])) or self.times[0] > 0:
                raise PreconditionError("table breakpoints must increase and start at t <= 0")
            if any(len(row) != self.dimension for row in self.rows):
                raise DimensionError(f"table rows must have {self.dimension} entries")

    @classmethod
    def zero(cls, dimension: int) -> "Signal":
        return cls(SignalKind.ZERO, dimension)

    @classmethod
    def constant(cls, values: Sequence[float]) -> "Signal":
        values = tuple(float(v) for v in np.atleast_1d(values))
        return cls(SignalKind.CONSTANT, len(values), values)

    @classmethod
    def sines(cls, amplitudes: Sequence[float], frequencies: Sequence[float], dimension: int = 1,
              phases: Sequence[float] = (), direction: Sequence[float] = ()) -> "Signal":
        return cls(SignalKind.SINES, dimension, tuple(float(v) for v in direction),
                   tuple(float(a) for a in amplitudes), tuple(float(w) for w in frequencies),
                   tuple(float(p) for p in phases))

    @classmethod
    def table(cls, times: Sequence[float], rows: Sequence[Sequence[float]]) -> "Signal":
        rows = tuple(tuple(float(v) for v in np.atleast_1d(row)) for row in rows)
        return cls(SignalKind.TABLE, len(rows[0]) if rows else 0, times=tuple(float(t) for t in times),
                   rows=rows)

    def __call__(self, t: float) -> np.ndarray:
        if self.kind == SignalKind.ZERO:
            return np.zeros(self.dimension)
        if self.kind == SignalKind.CONSTANT:
            return np.array(self.values)
        if self.kind == SignalKind.SINES:
            phases = self.phases or (0.0,) * len(self.amplitudes)
            scalar = sum(a * math.sin(w * t + p) for a, w, p in zip(self.amplitudes, self.frequencies, phases))
            direction = np.array(self.values) if self.values else np.ones(self.dimension)
            return scalar * direction
        index = int(np.searchsorted(self.times, t, side="right")) - 1
        return np.array(self.rows[max(index, 0)])

    def to_dict(self) -> Dict[str, object]:
        data: Dict[str, object] = {"kind": self.kind.value, "dimension": self.dimension}
        if self.kind == SignalKind.CONSTANT:
            data["values"] = list(self.values)
        elif self.kind == SignalKind.SINES:
            data.update({"amplitudes": list(self.amplitudes), "frequencies": list(self.frequencies)})
            if self.phases:
                data["phases"] = list(self.phases)
            if self.values:
                data["direction"] = list(self.values)
        elif self.kind == SignalKind.TABLE:
            data.update({"times": list(self.times), "rows": [list(r) for r in self.rows]})
        return data


def signal_from_dict(data: Dict[str, object], dimension: int) -> Signal:
    """Signal from its to_dict form; scalar specs are broadcast to the requested dimension"""
    kind = SignalKind(data["kind"])
    if kind == SignalKind.ZERO:
        return Signal.zero(dimension)
    if kind == SignalKind.CONSTANT:
        values = list(np.atleast_1d(data["values"]))
        return Signal.constant(values * dimension if len(values) == 1 and dimension > 1 else values)
    if kind == SignalKind.SINES:
        return Signal.sines(data["amplitudes"], data["frequencies"], dimension,
                            data.get("phases", ()), data.get("direction", ()))
    return Signal.table(data["times"], data["rows"])


def standard_inputs(dimension: int) -> List[Signal]:
    """u = 0, u = 1 and u = sin t + sin 3t on every channel"""
    return [Signal.zero(dimension), Signal.constant([1.0] * dimension),
            Signal.sines([1.0, 1.0], [1.0, 3.0], dimension)]


# ---------------------------------------------------------------------------
# Trajectories and integration
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """
    Uniform-grid solution. states has shape (steps + 1, n) or (steps + 1, n, batch);
    channels share the leading time axis.
    """
    t: np.ndarray
    states: np.ndarray
    channels: Dict[str, np.ndarray] = field(default_factory=dict)
    diverged: bool = False
    divergence_time: Optional[float] = None

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def channel(self, name: str) -> np.ndarray:
        if name == "x":
            return self.states
        if name not in self.channels:
            raise DimensionError(f"trajectory has no channel {name}; available: x, {', '.join(self.channels)}")
        return self.channels[name]

    def l2_norm(self, name: str) -> np.ndarray:
        """Finite-horizon L2 norm of a channel (per batch column), trapezoidal rule"""
        values = self.channel(name)
        return np.sqrt(trapezoid(np.sum(values ** 2, axis=1), self.t, axis=0))

    def to_frame(self, column: int = 0) -> pd.DataFrame:
        """Time column followed by every channel, one column per component"""
        data = {"t": self.t}
        for name, values in [("x", self.states)] + list(self.channels.items()):
            if values.ndim == 3:
                values = values[:, :, column]
            for j in range(values.shape[1]):
                data[f"{name}{j + 1}"] = values[:, j]
        return pd.DataFrame(data)

    def to_csv(self, path: Union[str, Path], column: int = 0):
        self.to_frame(column).to_csv(path, index=False, float_format="%.17g")


def step_count(T: float, dt: float) -> int:
    if not dt > 0:
        raise PreconditionError(f"dt must be positive, got {dt}")
    if not T >= dt:
        raise PreconditionError(f"horizon T = {T} must be at least dt = {dt}")
    return int(round(T / dt))


Dynamics = Callable[[np.ndarray, float], np.ndarray]


def rk4(rhs: Dynamics, x0: np.ndarray, T: float, dt: float) -> Tuple[np.ndarray, np.ndarray, Optional[float]]:
    """Classical fixed-step RK4; stops at the first non-finite or |x| > 1e9 state"""
    steps = step_count(T, dt)
    x = np.array(x0, dtype=float)
    t = np.arange(steps + 1) * dt
    states = np.empty((steps + 1,) + x.shape)
    states[0] = x
    for k in range(steps):
        tk = t[k]
        k1 = rhs(x, tk)
        k2 = rhs(x + 0.5 * dt * k1, tk + 0.5 * dt)
        k3 = rhs(x + 0.5 * dt * k2, tk + 0.5 * dt)
        k4 = rhs(x + dt * k3, tk + dt)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        states[k + 1] = x
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_LIMIT:
            logger.warning(f"⚠️ Divergence detected at t = {t[k + 1]:.6g}")
            return t[:k + 2], states[:k + 2], float(t[k + 1])
    return t, states, None


def _columns(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Broadcast a vector over the batch axes of x"""
    return v.reshape(v.shape + (1,) * (x.ndim - 1))


def integrate(system: Union[PlantModel, VectorField, Dynamics], x0: np.ndarray,
              u: Optional[Signal] = None, T: float = 20.0, dt: float = 1e-3) -> Trajectory:
    """
    Integrate dx/dt = f(x) + B u(t) (plant), dx/dt = f(x) (field) or
    dx/dt = rhs(x, t) (callable or closed loop, so disturbances follow t). x0 may carry
    trailing batch axes.
    """
    x0 = np.asarray(x0, dtype=float)
    if isinstance(system, PlantModel):
        u = u or Signal.zero(system.m)
        if u.dimension != system.m:
            raise DimensionError(f"input has dimension {u.dimension}, plant has m = {system.m}")
        if x0.shape[0] != system.n:
            raise DimensionError(f"initial state has {x0.shape[0]} entries, plant has n = {system.n}")

        def rhs(x, t):
            return system.field.evaluate(x) + _columns(system.B @ u(t), x)

        t, states, diverged_at = rk4(rhs, x0, T, dt)
        inputs = np.stack([u(tk) for tk in t])
        outputs = np.einsum("pn,kn...->kp...", system.C, states)
        if system.D is not None:
            outputs = outputs + _columns_time(inputs @ system.D.T, outputs)
        channels = {"u": inputs, "y": outputs}
    elif isinstance(system, ClosedLoopField):
        if x0.shape[0] != system.n:
            raise DimensionError(f"initial state has {x0.shape[0]} entries, closed loop has n = {system.n}")
        t, states, diverged_at = rk4(system.rhs, x0, T, dt)
        channels = {}
    elif isinstance(system, VectorField):
        if x0.shape[0] != system.n:
            raise DimensionError(f"initial state has {x0.shape[0]} entries, field has n = {system.n}")
        t, states, diverged_at = rk4(lambda x, _t: system.evaluate(x), x0, T, dt)
        channels = {}
    else:
        t, states, diverged_at = rk4(system, x0, T, dt)
        channels = {}
    return Trajectory(t, states, channels, diverged_at is not None, diverged_at)


def _columns_time(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


# ---------------------------------------------------------------------------
# Coupled systems
# ---------------------------------------------------------------------------

class ClosedLoopField(VectorField):
    """
    Plant with dynamic output feedback and disturbances w = (w_u, w_y):
    dx/dt = f(x) + B (u + w_u), y = C x + w_y, u = -K_c x_c,
    dx_c/dt = f_c(x_c) + A_c x_c + L_c y.
    """

    def __init__(self, plant: PlantModel, controller: Controller,
                 w_u: Optional[Signal] = None, w_y: Optional[Signal] = None):
        controller.check_plant(plant)
        self.plant = plant
        self.controller = controller
        self.w_u = w_u or Signal.zero(plant.m)
        self.w_y = w_y or Signal.zero(plant.p)
        if self.w_u.dimension != plant.m or self.w_y.dimension != plant.p:
            raise DimensionError(f"disturbances must have dimensions (m, p) = ({plant.m}, {plant.p})")
        self.n = plant.n + controller.order

    def split(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return z[:self.plant.n], z[self.plant.n:]

    def signals(self, z: np.ndarray, t: float) -> Tuple[np.ndarray, np.ndarray]:
        x, x_c = self.split(z)
        u = -self.controller.K_c @ x_c
        y = self.plant.C @ x + _columns(self.w_y(t), x)
        return u, y

    def rhs(self, z: np.ndarray, t: float) -> np.ndarray:
        x, x_c = self.split(z)
        u, y = self.signals(z, t)
        dx = self.plant.field.evaluate(x) + self.plant.B @ (u + _columns(self.w_u(t), x))
        dx_c = self.controller.field.evaluate(x_c) + self.controller.A_c @ x_c + self.controller.L_c @ y
        return np.concatenate([dx, dx_c], axis=0)

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        """Disturbances frozen at t = 0; integrate follows rhs(z, t)"""
        return self.rhs(np.asarray(z, dtype=float), 0.0)

    def jacobian_at(self, z: np.ndarray) -> np.ndarray:
        """[[J_f(x), -B K_c], [L_c C, J_fc(x_c) + A_c]]; the disturbances are additive and drop out"""
        z = np.asarray(z, dtype=float)
        x, x_c = self.split(z)
        batch = z.shape[1:]

        def tile(M):
            return np.broadcast_to(M.reshape(M.shape + (1,) * len(batch)), M.shape + batch)

        c = self.controller
        top = np.concatenate([self.plant.field.jacobian_at(x), tile(-self.plant.B @ c.K_c)], axis=1)
        bottom = np.concatenate([tile(c.L_c @ self.plant.C), c.field.jacobian_at(x_c) + tile(c.A_c)], axis=1)
        return np.concatenate([top, bottom], axis=0)


@handle_stage_error("simulate")
def simulate_closed_loop(plant: PlantModel, controller: Controller, x0: np.ndarray, xc0: np.ndarray,
                         w_u: Optional[Signal] = None, w_y: Optional[Signal] = None,
                         T: float = 20.0, dt: float = 1e-3) -> Trajectory:
    """Stacked plant/controller simulation with channels x_c, u, y, z = (u, C x), w = (w_u, w_y)"""
    loop = ClosedLoopField(plant, controller, w_u, w_y)
    x0 = np.asarray(x0, dtype=float)
    xc0 = np.asarray(xc0, dtype=float)
    if x0.shape[0] != plant.n or xc0.shape[0] != controller.order:
        raise DimensionError(f"initial states must have {plant.n} and {controller.order} entries")
    t, states, diverged_at = rk4(loop.rhs, np.concatenate([x0, xc0], axis=0), T, dt)
    x, x_c = states[:, :plant.n], states[:, plant.n:]
    u = -np.einsum("mk,tk...->tm...", controller.K_c, x_c)
    w_u = np.stack([loop.w_u(tk) for tk in t])
    w_y = np.stack([loop.w_y(tk) for tk in t])
    z_y = np.einsum("pn,tn...->tp...", plant.C, x)
    y = z_y + _columns_time(w_y, z_y)
    channels = {"x_c": x_c, "u": u, "y": y, "z": np.concatenate([u, z_y], axis=1),
                "w": _columns_time(np.concatenate([w_u, w_y], axis=1), u)}
    return Trajectory(t, x, channels, diverged_at is not None, diverged_at)


def simulate_observer(plant: PlantModel, observer: Observer, x0: np.ndarray, xhat0: np.ndarray,
                      u: Optional[Signal] = None, T: float = 20.0, dt: float = 1e-3) -> Trajectory:
    """Plant and observer driven by the same input; channels x_hat, error_norm, u, y"""
    u = u or Signal.zero(plant.m)
    n = plant.n

    def rhs(z, t):
        x, x_hat = z[:n], z[n:]
        u_t = _columns(u(t), x)
        y = plant.C @ x
        return np.concatenate([plant.field.evaluate(x) + plant.B @ u_t,
                               observer.dynamics(x_hat, u_t, y)], axis=0)

    z0 = np.concatenate([np.asarray(x0, dtype=float), np.asarray(xhat0, dtype=float)], axis=0)
    t, states, diverged_at = rk4(rhs, z0, T, dt)
    x, x_hat = states[:, :n], states[:, n:]
    channels = {"x_hat": x_hat, "error_norm": np.linalg.norm(x - x_hat, axis=1)[:, None],
                "u": np.stack([u(tk) for tk in t]), "y": np.einsum("pn,tn...->tp...", plant.C, x)}
    return Trajectory(t, x, channels, diverged_at is not None, diverged_at)


def simulate_reduction(full: PlantModel, reduced: PlantModel, u: Signal, T: float = 20.0,
                       dt: float = 1e-3) -> Tuple[Trajectory, Trajectory]:
    """Full and reduced models from the zero state under the same input"""
    return (integrate(full, np.zeros(full.n), u, T, dt),
            integrate(reduced, np.zeros(reduced.n), u, T, dt))


# ---------------------------------------------------------------------------
# Verifiers
# ---------------------------------------------------------------------------

@dataclass
class VerificationReport:
    name: str
    status: str  # pass | fail | skipped
    trials: int
    metrics: Dict[str, float] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> Dict[str, object]:
        return {"name": self.name, "status": self.status, "trials": self.trials,
                "metrics": dict(self.metrics), "failures": list(self.failures), "notes": list(self.notes)}


def sphere_samples(n: int, count: int, seed: int = 0, radii: Sequence[float] = (1.0, 10.0)) -> np.ndarray:
    """count points (as columns) uniformly on spheres, radii alternating by trial index"""
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n, count))
    directions /= np.linalg.norm(directions, axis=0, keepdims=True)
    scales = np.array([radii[k % len(radii)] for k in range(count)])
    return directions * scales


def _fan_out(jobs: Sequence[Callable[[], object]]) -> List[object]:
    """Run independent jobs concurrently; results in job order"""
    if len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=min(MAX_WORKERS, len(jobs))) as executor:
        return list(executor.map(lambda job: job(), jobs))


def _quadratic(M: np.ndarray, d: np.ndarray) -> np.ndarray:
    """d^T M d along the state axis; d has shape (..., n, batch)"""
    return np.einsum("...ib,ij,...jb->...b", d, M, d)


def verify_ies(plant: PlantModel, X: np.ndarray, epsilon: float, trials: int = 100, T: float = 5.0,
               dt: float = 1e-3, seed: int = 0, inputs: Optional[Sequence[Signal]] = None) -> VerificationReport:
    """
    |x(t) - x'(t)|^2_{X^-1} <= exp(-eps t) |x(0) - x'(0)|^2_{X^-1} (1 + 1e-6) on the grid,
    for random pairs sharing an input.
    """
    X_inv = spd_inv(X, "X")
    inputs = list(inputs or standard_inputs(plant.m))
    starts = sphere_samples(plant.n, trials, seed)
    others = sphere_samples(plant.n, trials, seed + 1)
    groups = [[k for k in range(trials) if k % len(inputs) == g] for g in range(len(inputs))]

    def run(g):
        idx = groups[g]
        if not idx:
            return None
        x0 = np.concatenate([starts[:, idx], others[:, idx]], axis=1)
        return integrate(plant, x0, inputs[g], T, dt)

    results = _fan_out([lambda g=g: run(g) for g in range(len(inputs))])
    report = VerificationReport("ies", "pass", trials)
    worst = -np.inf
    for g, trajectory in enumerate(results):
        if trajectory is None:
            continue
        k = len(groups[g])
        delta = trajectory.states[:, :, :k] - trajectory.states[:, :, k:]
        V = _quadratic(X_inv, delta)
        envelope = np.exp(-epsilon * trajectory.t)[:, None] * V[0] * (1.0 + 1e-6) + 1e-12
        ratio = np.max(V / envelope, axis=0)
        worst = max(worst, float(ratio.max()))
        if trajectory.diverged:
            report.failures.append(f"input {g}: divergence at t = {trajectory.divergence_time:.6g}")
        for j, trial in enumerate(groups[g]):
            if ratio[j] > 1.0:
                report.failures.append(f"trial {trial}: decay envelope exceeded by factor {ratio[j]:.6g}")
    report.metrics["worst_ratio"] = worst
    if report.failures:
        report.status = "fail"
    _log_report(report)
    return report


def verify_observability_decay(plant: PlantModel, Y: np.ndarray, epsilon: float, trials: int = 50,
                               T: float = 10.0, dt: float = 1e-3, seed: int = 0,
                               u_star: Optional[Sequence[Signal]] = None) -> VerificationReport:
    """
    int_0^T |y - y'|^2 dt + |x(T) - x'(T)|^2_Y <= |x(0) - x'(0)|^2_Y (1 + 1e-6)
    for pairs driven by the same constant input.
    """
    Y = np.asarray(Y, dtype=float)
    inputs = list(u_star or [Signal.zero(plant.m), Signal.constant([1.0] * plant.m)])
    starts = sphere_samples(plant.n, trials, seed)
    others = sphere_samples(plant.n, trials, seed + 1)
    groups = [[k for k in range(trials) if k % len(inputs) == g] for g in range(len(inputs))]

    def run(g):
        idx = groups[g]
        if not idx:
            return None
        return integrate(plant, np.concatenate([starts[:, idx], others[:, idx]], axis=1), inputs[g], T, dt)

    results = _fan_out([lambda g=g: run(g) for g in range(len(inputs))])
    report = VerificationReport("observability_decay", "pass", trials)
    report.notes.append(f"eps = {epsilon:g} enters as slack only")
    worst = -np.inf
    for g, trajectory in enumerate(results):
        if trajectory is None:
            continue
        k = len(groups[g])
        if trajectory.diverged:
            report.failures.append(f"input {g}: divergence at t = {trajectory.divergence_time:.6g}")
            continue
        y = trajectory.channel("y")
        dy = y[:, :, :k] - y[:, :, k:]
        energy = trapezoid(np.sum(dy ** 2, axis=1), trajectory.t, axis=0)
        delta = trajectory.states[:, :, :k] - trajectory.states[:, :, k:]
        lhs = energy + _quadratic(Y, delta[-1:])[0]
        rhs = _quadratic(Y, delta[:1])[0] * (1.0 + 1e-6) + 1e-12
        ratio = lhs / rhs
        worst = max(worst, float(ratio.max()))
        for j, trial in enumerate(groups[g]):
            if ratio[j] > 1.0:
                report.failures.append(f"trial {trial}: output energy bound exceeded by factor {ratio[j]:.6g}")
    report.metrics["worst_ratio"] = worst
    if report.failures:
        report.status = "fail"
    _log_report(report)
    return report


def verify_error_bound(full: PlantModel, reduced: PlantModel, sigma: Sequence[float], r: int,
                       inputs: Sequence[Signal], T: float = 20.0, dt: float = 1e-3,
                       seed: int = 0) -> VerificationReport:
    """
    ||y - y_r||_T <= 2 sum_{i>r} sigma_i ||u||_T (1 + 1e-3) from zero initial states.
    Skipped when the full field is not odd.
    """
    report = VerificationReport(f"error_bound_r{r}", "pass", len(inputs))
    oddness = check_oddness(full, seed=seed)
    if not oddness.passed:
        report.status = "skipped"
        report.notes.append(f"field is not odd (residual {oddness.residual:.3e}); bound does not apply")
        _log_report(report)
        return report
    bound = 2.0 * float(np.sum(np.asarray(sigma, dtype=float)[r:]))
    report.metrics["bound"] = bound

    results = _fan_out([lambda u=u: simulate_reduction(full, reduced, u, T, dt) for u in inputs])
    for k, (trajectory, reduced_trajectory) in enumerate(results):
        if trajectory.diverged or reduced_trajectory.diverged:
            report.failures.append(f"input {k}: divergence")
            continue
        error = trapezoid(np.sum((trajectory.channel("y") - reduced_trajectory.channel("y")) ** 2, axis=1),
                          trajectory.t)
        lhs = math.sqrt(float(error))
        u_norm = float(trajectory.l2_norm("u"))
        rhs = bound * u_norm * (1.0 + 1e-3) + 1e-12
        report.metrics[f"input{k}_error"] = lhs
        report.metrics[f"input{k}_bound"] = bound * u_norm
        if lhs > rhs:
            report.failures.append(f"input {k}: ||y - y_r|| = {lhs:.6g} > {bound * u_norm:.6g}")
    if report.failures:
        report.status = "fail"
    _log_report(report)
    return report


def _system_field(system: Union[ClosedLoopField, PlantModel, VectorField]) -> VectorField:
    if isinstance(system, PlantModel):
        return system.field
    return system


def fitted_rate(t: np.ndarray, norms: np.ndarray) -> float:
    """Least-squares slope of log|state| on the tail half of the horizon"""
    half = len(t) // 2
    logs = np.log(np.maximum(norms[half:], 1e-300))
    slope, _ = np.polyfit(t[half:], logs, 1)
    return float(slope)


def verify_ges(system: Union[ClosedLoopField, PlantModel, VectorField], trials: int = 20, T: float = 20.0,
               dt: float = 1e-3, seed: int = 0, radii: Sequence[float] = (1.0, 10.0)) -> VerificationReport:
    """
    Exponential decay to the origin from random initial states (w = 0, u = 0):
    fitted tail slope <= -1e-3 and final norm <= 1e-6 initial norm for every trial.
    """
    field_ = _system_field(system)
    starts = sphere_samples(field_.n, trials, seed, radii)
    chunks = [list(range(k, trials, MAX_WORKERS)) for k in range(min(MAX_WORKERS, trials))]
    results = _fan_out([lambda idx=idx: integrate(field_, starts[:, idx], None, T, dt) for idx in chunks])
    report = VerificationReport("ges", "pass", trials)
    slopes = np.full(trials, np.nan)
    for idx, trajectory in zip(chunks, results):
        if trajectory.diverged:
            report.failures.extend(f"trial {k}: divergence" for k in idx)
            continue
        norms = np.linalg.norm(trajectory.states, axis=1)
        for j, k in enumerate(idx):
            slopes[k] = fitted_rate(trajectory.t, norms[:, j])
            ratio = norms[-1, j] / norms[0, j]
            if slopes[k] > -1e-3 or ratio > 1e-6:
                report.failures.append(f"trial {k}: slope {slopes[k]:.4g}, final/initial {ratio:.3e}")
    if np.any(np.isfinite(slopes)):
        report.metrics["slowest_rate"] = float(np.nanmax(slopes))
        report.metrics["mean_rate"] = float(np.nanmean(slopes))
    if report.failures:
        report.status = "fail"
    _log_report(report)
    return report


def verify_gain(plant: PlantModel, controller: Controller, gamma_claim: float,
                disturbances: Sequence[Tuple[Signal, Signal]], T: float = 20.0,
                dt: float = 1e-3) -> VerificationReport:
    """||z||_T <= gamma_claim ||w||_T (1 + 1e-3) from zero initial states"""
    report = VerificationReport("gain", "pass", len(disturbances))
    report.metrics["gamma_claim"] = gamma_claim
    results = _fan_out([lambda w=w: simulate_closed_loop(plant, controller, np.zeros(plant.n),
                                                          np.zeros(controller.order), w[0], w[1], T, dt)
                        for w in disturbances])
    worst = 0.0
    for k, trajectory in enumerate(results):
        if trajectory.diverged:
            report.failures.append(f"disturbance {k}: divergence")
            continue
        z_norm = float(trajectory.l2_norm("z"))
        w_norm = float(trajectory.l2_norm("w"))
        if w_norm > 0:
            worst = max(worst, z_norm / w_norm)
        if z_norm > gamma_claim * w_norm * (1.0 + 1e-3) + 1e-12:
            report.failures.append(f"disturbance {k}: ||z|| = {z_norm:.6g} > {gamma_claim:.6g} * {w_norm:.6g}")
    report.metrics["observed_gain"] = worst
    if report.failures:
        report.status = "fail"
    _log_report(report)
    return report


def standard_disturbances(plant: PlantModel) -> List[Tuple[Signal, Signal]]:
    """Sinusoidal and step disturbances on the input and output channels"""
    return [(Signal.sines([1.0, 1.0], [1.0, 3.0], plant.m), Signal.zero(plant.p)),
            (Signal.zero(plant.m), Signal.sines([1.0], [2.0], plant.p)),
            (Signal.constant([1.0] * plant.m), Signal.sines([0.5], [1.0], plant.p))]


def _log_report(report: VerificationReport):
    marker = {"pass": "✅", "fail": "❌", "skipped": "⚠️"}[report.status]
    logger.info(f"{marker} verify {report.name}: {report.status} ({report.trials} trials)")
    for failure in report.failures[:5]:
        logger.debug(f"   {failure}")
