#!/usr/bin/env python3
"""
gdbal command line
==================

Runs one job file through a pipeline stage and writes matrices (CSV),
trajectories (CSV), report.json, report.txt and the effective configuration
into the output directory.

Usage:
    python gdbal.py <gramians|reduce|lqg|hinf|simulate|verify> --config job.json
                    [--out DIR] [--seed N] [--verbose]
"""

import argparse
import logging
import sys
from dataclasses import replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from balancing import balancing_transform, bound_table, choose_order
from error_handler import (EXIT_OK, EXIT_VERIFICATION_FAILED, ConfigError, GdbalError, InfeasibleError,
                           error_handler)
from expr import Interval, to_source
from gdreduce import GdGramians, GdReduction, gd_reduce, reduced_field_expressions, solve_gd_gramians
from hinfsyn import HinfDesign, hinf_design, reduce_controller
from job_config import JobConfig, PlantSpec, ScenarioSpec, dump_json, load_job_config_file
from lmi import SolverOptions, block_diagonal_mask
from lqgsyn import Controller, LqgDesign, build_observer, build_reduced_lqg_controller, lqg_bound, lqg_design
from sim import (ClosedLoopField, Signal, Trajectory, VerificationReport, integrate, signal_from_dict,
                 simulate_closed_loop, simulate_observer, simulate_reduction, sphere_samples,
                 standard_disturbances, verify_error_bound, verify_ges, verify_gain, verify_ies,
                 verify_observability_decay)
from sysmodel import (BUILTIN_PLANTS, PlantModel, VertexSet, build_vertices, builtin_plant, jacobian_box_check,
                      plant_from_expressions, shift_to_equilibrium)

logger = logging.getLogger("gdbal")

COMMANDS = ("gramians", "reduce", "lqg", "hinf", "simulate", "verify")


def build_plant(spec: PlantSpec) -> PlantModel:
    domain = None if spec.domain is None else tuple(Interval(lo, hi) for lo, hi in spec.domain)
    if spec.builtin is not None:
        params = spec.param_dict
        if spec.builtin not in BUILTIN_PLANTS:
            raise ConfigError(f"plant.builtin: unknown plant {spec.builtin!r}; available: {sorted(BUILTIN_PLANTS)}")
        if "epsilon" in params:
            raise ConfigError("plant.params: set epsilon with plant.epsilon")
        try:
            plant = builtin_plant(spec.builtin, epsilon=spec.epsilon, **params)
        except TypeError as exc:
            raise ConfigError(f"plant.params: {exc}")
        if domain is not None:
            if len(domain) != plant.n:
                raise ConfigError(f"plant.domain: {len(domain)} intervals for n = {plant.n}")
            plant = replace(plant, domain=domain)
    else:
        plant = plant_from_expressions(list(spec.f), np.array(spec.B), np.array(spec.C), spec.epsilon,
                                       "custom", domain)
    if spec.shift_equilibrium:
        plant, x_star = shift_to_equilibrium(plant, u_star=spec.u_star)
        logger.info(f"Shifted equilibrium x* = {np.array2string(x_star, precision=6)}")
    return plant


class Job:
    """Lazily built pipeline objects shared by the commands of one run"""

    def __init__(self, config: JobConfig):
        self.config = config
        self.out = Path(config.output_dir)
        self.files: List[str] = []
        self._gramians: Optional[GdGramians] = None
        self._lqg: Optional[LqgDesign] = None
        self._hinf: Optional[HinfDesign] = None
        self._reductions: Dict[int, GdReduction] = {}

    @cached_property
    def plant(self) -> PlantModel:
        return build_plant(self.config.plant)

    @cached_property
    def vertices(self) -> VertexSet:
        spec = self.config.vertices
        explicit = None if spec.matrices is None else [np.array(m) for m in spec.matrices]
        return build_vertices(self.plant, spec.strategy, explicit=explicit)

    @cached_property
    def options(self) -> SolverOptions:
        s = self.config.solver
        return SolverOptions(margin=s.margin, tol=s.tol, max_iter=s.max_iter, seed=self.config.seed,
                             backend=s.backend, fallback_backend=s.fallback_backend, retry=s.retry)

    @cached_property
    def mask(self) -> Optional[np.ndarray]:
        blocks = self.config.reduction.blocks
        if blocks is None:
            return None
        if sum(blocks) != self.plant.n:
            raise ConfigError(f"reduction.blocks: sizes sum to {sum(blocks)}, plant has n = {self.plant.n}")
        return block_diagonal_mask(blocks)

    def gramians(self) -> GdGramians:
        if self._gramians is None:
            self._gramians = solve_gd_gramians(self.plant, self.vertices, self.config.reduction.objective,
                                               self.mask, self.options)
        return self._gramians

    def order(self) -> int:
        spec = self.config.reduction
        if spec.r != "auto":
            return int(spec.r)
        if spec.threshold is None:
            raise ConfigError("reduction.threshold: required when reduction.r is 'auto'")
        g = self.gramians()
        _, _, sigma = balancing_transform(g.X, g.Y)
        r = choose_order(sigma, spec.threshold)
        logger.info(f"Chosen order r = {r} for bound threshold {spec.threshold:g}")
        return r

    def reduction(self, r: int) -> GdReduction:
        if r not in self._reductions:
            self._reductions[r] = gd_reduce(self.plant, self.vertices, r, self.gramians(),
                                            self.config.reduction.block_orders, self.options, self.config.seed)
        return self._reductions[r]

    def lqg(self) -> LqgDesign:
        if self._lqg is None:
            r = self.config.reduction.r
            r = r if isinstance(r, int) and r < self.plant.n else None
            self._lqg = lqg_design(self.plant, self.vertices, r, mask=self.mask, options=self.options)
        return self._lqg

    def hinf(self) -> HinfDesign:
        if self._hinf is None:
            spec = self.config.hinf
            if spec is None:
                raise ConfigError("hinf: section required for H-inf commands")
            P = None if spec.P_inf is None else np.array(spec.P_inf)
            Q = None if spec.Q_inf is None else np.array(spec.Q_inf)
            self._hinf = hinf_design(self.plant, self.vertices, spec.value, spec.orders, P, Q,
                                     spec.override_spectral, spec.improve_gamma, self.options, self.config.seed)
        return self._hinf

    def controllers(self, kind: str, orders: Sequence[int]) -> List[Tuple[str, Controller]]:
        """Full-order controller (order n or no orders given) and the requested reduced ones"""
        n = self.plant.n
        wanted = list(orders) or [n]
        result = []
        for r in wanted:
            if kind == "lqg":
                design = self.lqg()
                if r >= n:
                    result.append(("lqg_full", design.controller))
                else:
                    result.append((f"lqg_r{r}", build_reduced_lqg_controller(design.balanced, r)))
            else:
                design = self.hinf()
                if r >= n:
                    result.append(("hinf_full", design.controller))
                else:
                    if r not in design.reduced:
                        design.reduced[r] = reduce_controller(self.plant, design.cert, r, self.config.seed)
                    result.append((f"hinf_r{r}", design.reduced[r][0]))
        return result

    # output helpers

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def write_matrix(self, name: str, M: np.ndarray):
        pd.DataFrame(np.atleast_2d(M)).to_csv(self.path(name), index=False, header=False, float_format="%.17g")

    def write_frame(self, name: str, frame: pd.DataFrame):
        frame.to_csv(self.path(name), index=False, float_format="%.17g")

    def write_lines(self, name: str, lines: Sequence[str]):
        with open(self.path(name), "w", encoding="utf-8") as handle:
            handle.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

CommandResult = Tuple[Dict[str, object], List[str], int]


def _header(job: Job) -> List[str]:
    plant = job.plant
    return [f"job {job.config.name}: plant {plant.name} (n = {plant.n}, m = {plant.m}, p = {plant.p}, "
            f"eps = {plant.epsilon:g})",
            f"vertices: {len(job.vertices)} ({job.vertices.strategy.value}, "
            f"{'sound' if job.vertices.sound else 'NOT certified sound'})"]


def cmd_gramians(job: Job) -> CommandResult:
    g = job.gramians()
    job.write_matrix("X.csv", g.X)
    job.write_matrix("Y.csv", g.Y)
    job.write_frame("eigenvalues.csv", g.eigenvalue_table())
    excess = jacobian_box_check(job.plant, job.vertices, seed=job.config.seed) \
        if job.plant.field.expression_backed else None
    report = {"plant": job.plant.describe(), "vertices": job.vertices.describe(), "gramians": g.to_dict(),
              "jacobian_box_excess": excess}
    lines = _header(job) + [f"GD Gramians feasible, checker worst violation {g.worst_violation:.3e}"]
    if excess:
        lines.append(f"WARNING: sampled Jacobians leave the vertex box by {excess:.3e}")
    return report, lines, EXIT_OK


def cmd_reduce(job: Job) -> CommandResult:
    r = job.order()
    result = job.reduction(r)
    sigma = result.balanced.sigma
    job.write_frame("sigma.csv", bound_table(sigma))
    job.write_matrix("T.csv", result.balanced.T)
    job.write_matrix("B1.csv", result.reduced.B1)
    job.write_matrix("C1.csv", result.reduced.C1)
    expressions = reduced_field_expressions(job.plant, result.balanced.T, result.balanced.T_inv,
                                            result.reduced.kept) \
        if job.plant.field.expression_backed else None
    if expressions is not None:
        job.write_lines("reduced_field.txt", [to_source(e) for e in expressions])
    report = {"plant": job.plant.describe(), "vertices": job.vertices.describe(),
              "gramians_worst_violation": job.gramians().worst_violation, "reduction": result.to_dict(),
              "bound_table": bound_table(sigma).to_dict(orient="records")}
    lines = _header(job) + [f"sigma = {np.array2string(sigma, precision=6)}",
                            f"reduced to r = {result.reduced.r}, error bound {result.bound:.6g} "
                            f"({'certified' if result.certified else 'NOT certified'})"]
    lines.extend(f"  {note}" for note in result.notes)
    lines.append(f"closure check worst violation {result.closure.worst:.3e}")
    return report, lines, EXIT_OK


def _write_controller(job: Job, label: str, controller: Controller):
    job.write_matrix(f"{label}_A.csv", controller.A_c)
    job.write_matrix(f"{label}_L.csv", controller.L_c)
    job.write_matrix(f"{label}_K.csv", controller.K_c)


def cmd_lqg(job: Job) -> CommandResult:
    design = job.lqg()
    job.write_matrix("P.csv", design.pair.P)
    job.write_matrix("Q.csv", design.pair.Q)
    pi = design.balanced.sigma
    job.write_frame("pi.csv", pd.DataFrame({"r": np.arange(1, len(pi) + 1), "pi_r": pi,
                                            "bound": [lqg_bound(pi, r) for r in range(1, len(pi) + 1)]}))
    _write_controller(job, "controller", design.controller)
    if design.reduced_controller is not None:
        _write_controller(job, f"controller_r{design.reduced_controller.order}", design.reduced_controller)
    report = {"plant": job.plant.describe(), "vertices": job.vertices.describe(), "lqg": design.to_dict()}
    lines = _header(job) + [
        f"GD Riccati pair feasible, quadratic recheck worst violation {design.pair.worst_violation:.3e}",
        f"RCR Gramians worst violation {design.rcr_report.worst:.3e}",
        f"LCR Gramians worst violation {design.lcr_report.worst:.3e}",
        f"pi = {np.array2string(pi, precision=6)}",
        f"LQG controller: GES {'certified' if design.controller.certified else 'NOT certified'}"]
    lines.extend(f"  {note}" for note in design.controller.notes + design.notes)
    return report, lines, EXIT_OK


def cmd_hinf(job: Job) -> CommandResult:
    design = job.hinf()
    cert = design.cert
    job.write_matrix("P_inf.csv", cert.P)
    job.write_matrix("R_inf.csv", cert.R)
    job.write_matrix("Q_inf.csv", cert.Q)
    table = pd.DataFrame(design.to_dict()["rho_table"])
    table.insert(1, "pi_r", cert.pi)
    job.write_frame("pi.csv", table)
    _write_controller(job, "controller", design.controller)
    for r, (controller, _) in sorted(design.reduced.items()):
        _write_controller(job, f"controller_r{r}", controller)
    report = {"plant": job.plant.describe(), "vertices": job.vertices.describe(), "hinf": design.to_dict()}
    lines = _header(job) + [
        f"gamma = {cert.gamma:.6g} (beta = {cert.beta:.6g}), worst violation {cert.report.worst:.3e}",
        f"pi = {np.array2string(cert.pi, precision=4)}",
        f"lambda_max(P_inf Q_inf) = {cert.lambda_max:.6g}: spectral condition "
        f"{'holds' if cert.spectral_ok else 'UNMET'}",
        f"selected order r = {design.order}{'' if design.order_found else ' (no reduced order qualifies)'}"]
    lines.extend(f"  {note}" for note in cert.notes + design.controller.notes + design.notes)
    for r, (_, conditions) in sorted(design.reduced.items()):
        lines.extend(conditions.lines())
    if design.improvement is not None:
        lines.append(f"gamma improvement: alpha = {design.improvement.alpha:.6g}, "
                     f"gamma_bar = {design.improvement.gamma_bar:.6g}")
        if design.recertified is not None:
            lines.append(f"recertified at gamma_bar: spectral condition "
                         f"{'holds' if design.recertified.spectral_ok else 'UNMET'}")
    return report, lines, EXIT_OK


def _initial_state(values: Optional[Sequence[float]], n: int, seed: int, what: str) -> np.ndarray:
    if values is None:
        return sphere_samples(n, 1, seed)[:, 0]
    if len(values) != n:
        raise ConfigError(f"{what}: expected {n} entries, got {len(values)}")
    return np.array(values, dtype=float)


def _signal(spec, dimension: int) -> Optional[Signal]:
    return None if spec is None else signal_from_dict(spec.to_signal_dict(), dimension)


def _trajectory_metrics(trajectory: Trajectory) -> Dict[str, object]:
    final = trajectory.final_state
    return {"diverged": trajectory.diverged, "divergence_time": trajectory.divergence_time,
            "final_state_norm": float(np.linalg.norm(final)), "steps": len(trajectory.t) - 1}


def run_scenario(job: Job, scenario: ScenarioSpec) -> Dict[str, object]:
    plant = job.plant
    sim = job.config.simulation
    u = _signal(scenario.input, plant.m)
    entry: Dict[str, object] = {"kind": scenario.kind, "files": []}
    if scenario.kind == "open-loop":
        x0 = np.zeros(plant.n) if scenario.x0 is None else _initial_state(scenario.x0, plant.n, 0, "x0")
        trajectory = integrate(plant, x0, u, sim.T, sim.dt)
        name = f"{scenario.name}.csv"
        job.write_frame(name, trajectory.to_frame())
        entry["files"].append(name)
        entry["metrics"] = _trajectory_metrics(trajectory)
    elif scenario.kind == "reduction":
        orders = list(scenario.orders) or [job.order()]
        frame = None
        for r in orders:
            result = job.reduction(r)
            full, reduced = simulate_reduction(plant, result.reduced.plant, u, sim.T, sim.dt)
            if frame is None:
                frame = full.to_frame()[["t"] + [f"y{j + 1}" for j in range(plant.p)] +
                                        [f"u{j + 1}" for j in range(plant.m)]]
            for j in range(plant.p):
                frame[f"y_r{r}_{j + 1}"] = reduced.channel("y")[:, j]
            error = float(np.sqrt(trapezoid(np.sum((full.channel("y") - reduced.channel("y")) ** 2, axis=1),
                                           full.t))) if not (full.diverged or reduced.diverged) else None
            entry.setdefault("metrics", {})[f"r{r}"] = {"output_error_l2": error, "bound": result.bound,
                                                        "diverged": full.diverged or reduced.diverged}
        name = f"{scenario.name}.csv"
        job.write_frame(name, frame)
        entry["files"].append(name)
    elif scenario.kind == "observer":
        observer = build_observer(plant, job.lqg().pair.Q)
        x0 = _initial_state(scenario.x0, plant.n, job.config.seed, f"{scenario.name}.x0")
        xhat0 = np.zeros(plant.n) if scenario.xc0 is None else _initial_state(scenario.xc0, plant.n, 0, "xc0")
        trajectory = simulate_observer(plant, observer, x0, xhat0, u, sim.T, sim.dt)
        name = f"{scenario.name}.csv"
        job.write_frame(name, trajectory.to_frame())
        entry["files"].append(name)
        entry["metrics"] = _trajectory_metrics(trajectory)
        entry["metrics"]["final_error_norm"] = float(trajectory.channel("error_norm")[-1, 0])
    else:
        x0 = _initial_state(scenario.x0, plant.n, job.config.seed, f"{scenario.name}.x0")
        w_u, w_y = _signal(scenario.w_u, plant.m), _signal(scenario.w_y, plant.p)
        entry["metrics"] = {}
        for label, controller in job.controllers(scenario.controller, scenario.orders):
            xc0 = np.zeros(controller.order) if scenario.xc0 is None or controller.order != len(scenario.xc0) \
                else np.array(scenario.xc0, dtype=float)
            trajectory = simulate_closed_loop(plant, controller, x0, xc0, w_u, w_y, sim.T, sim.dt)
            name = f"{scenario.name}_{label}.csv"
            job.write_frame(name, trajectory.to_frame())
            entry["files"].append(name)
            entry["metrics"][label] = _trajectory_metrics(trajectory)
    return entry


def cmd_simulate(job: Job) -> CommandResult:
    scenarios = job.config.simulation.scenarios
    report: Dict[str, object] = {"scenarios": {}}
    lines = [f"job {job.config.name}: {len(scenarios)} scenario(s)"]
    for scenario in scenarios:
        entry = run_scenario(job, scenario)
        report["scenarios"][scenario.name] = entry
        lines.append(f"  {scenario.name} ({scenario.kind}): {', '.join(entry['files'])}")
    return report, lines, EXIT_OK


def _skipped(name: str, reason: str) -> VerificationReport:
    report = VerificationReport(name, "skipped", 0)
    report.notes.append(reason)
    return report


def cmd_verify(job: Job) -> CommandResult:
    spec = job.config.verification
    sim = job.config.simulation
    T = spec.T or sim.T
    dt = sim.dt
    seed = job.config.seed
    plant = job.plant
    results: List[VerificationReport] = []
    notes: List[str] = []

    gramians = None
    if {"ies", "observability", "error_bound"} & set(spec.checks):
        try:
            gramians = job.gramians()
        except InfeasibleError as exc:
            notes.append(f"GD Gramians unavailable: {exc.message}")
    if "ies" in spec.checks:
        results.append(verify_ies(plant, gramians.X, plant.epsilon, spec.ies_trials, T, dt, seed)
                       if gramians else _skipped("ies", "no GD controllability Gramian"))
    if "observability" in spec.checks:
        results.append(verify_observability_decay(plant, gramians.Y, plant.epsilon, spec.trials, T, dt, seed)
                       if gramians else _skipped("observability_decay", "no GD observability Gramian"))
    if "error_bound" in spec.checks:
        inputs = [Signal.sines([1.0, 1.0], [1.0, 3.0], plant.m), Signal.constant([1.0] * plant.m)]
        for r in spec.error_bound_orders:
            if gramians is None:
                results.append(_skipped(f"error_bound_r{r}", "no GD Gramians"))
                continue
            reduction = job.reduction(r)
            results.append(verify_error_bound(plant, reduction.reduced.plant, reduction.balanced.sigma,
                                              reduction.reduced.r, inputs, T, dt, seed))

    if "ges" in spec.checks:
        for label, controller in _verification_controllers(job, notes):
            report = verify_ges(ClosedLoopField(plant, controller), spec.trials, T, dt, seed)
            report.name = f"ges_{label}"
            results.append(report)
    if "gain" in spec.checks and job.config.hinf is not None:
        design = job.hinf()
        disturbances = standard_disturbances(plant)
        report = verify_gain(plant, design.controller, design.cert.gamma, disturbances, T, dt)
        report.name = "gain_hinf_full"
        if not design.cert.spectral_ok:
            report.notes.append("spectral condition unmet: the gamma claim is not certified")
        results.append(report)
        for r, (controller, conditions) in sorted(design.reduced.items()):
            if conditions.gain_bound is None:
                results.append(_skipped(f"gain_hinf_r{r}", "gain bound undefined for this order"))
                continue
            report = verify_gain(plant, controller, conditions.gain_bound, disturbances, T, dt)
            report.name = f"gain_hinf_r{r}"
            results.append(report)
        if not design.cert.spectral_ok:
            notes.append(f"spectral condition gamma^2 > lambda_max(P_inf Q_inf) unmet "
                         f"({design.cert.gamma ** 2:.6g} <= {design.cert.lambda_max:.6g})")

    failed = [r.name for r in results if r.status == "fail"]
    report = {"checks": [r.to_dict() for r in results], "failed": failed, "notes": notes,
              "passed": not failed}
    lines = [f"job {job.config.name}: {len(results)} check(s)"]
    lines.extend(f"  {r.name}: {r.status}" + (f" ({r.failures[0]})" if r.failures else "") for r in results)
    lines.extend(f"  note: {note}" for note in notes)
    lines.append("ALL PASSED" if not failed else f"FAILED: {', '.join(failed)}")
    return report, lines, EXIT_OK if not failed else EXIT_VERIFICATION_FAILED


def _verification_controllers(job: Job, notes: List[str]) -> List[Tuple[str, Controller]]:
    controllers: List[Tuple[str, Controller]] = []
    try:
        controllers.extend(job.controllers("lqg", []))
    except InfeasibleError as exc:
        notes.append(f"LQG controller unavailable: {exc.message}")
    if job.config.hinf is not None:
        design = job.hinf()
        controllers.append(("hinf_full", design.controller))
        controllers.extend((f"hinf_r{r}", c) for r, (c, _) in sorted(design.reduced.items()))
    return controllers


COMMAND_TABLE: Dict[str, Callable[[Job], CommandResult]] = {
    "gramians": cmd_gramians,
    "reduce": cmd_reduce,
    "lqg": cmd_lqg,
    "hinf": cmd_hinf,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def run(command: str, config: JobConfig) -> int:
    """Run one command for a validated job; returns the process exit code"""
    job = Job(config)
    job.out.mkdir(parents=True, exist_ok=True)
    dump_json(config.to_dict(), job.out / "effective_config.json")
    try:
        report, lines, code = COMMAND_TABLE[command](job)
        report = {"command": command, "job": config.name, "seed": config.seed, "status": "ok",
                  "exit_code": code, **report, "files": sorted(job.files)}
    except Exception as raised:
        exc = error_handler.wrap(raised, command)
        error_handler.log_error(exc)
        code = error_handler.exit_code_for(exc)
        report = {"command": command, "job": config.name, "seed": config.seed, "status": "error",
                  "exit_code": code, "error": error_handler.create_error_response(exc)}
        lines = [f"job {config.name}: {command} failed at stage {exc.stage or 'unknown'}",
                 f"  {exc.error_type.value}: {exc.message}"]
    dump_json(report, job.out / "report.json")
    with open(job.out / "report.txt", "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Generalized differential balancing toolkit")
    parser.add_argument("command", choices=COMMANDS, help="Pipeline stage to run")
    parser.add_argument("--config", required=True, help="Path to the JSON job file")
    parser.add_argument("--out", help="Output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, help="Random seed (overrides seed)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_job_config_file(args.config).with_overrides(args.out, args.seed)
    except GdbalError as exc:
        logger.error(f"❌ {exc.message}")
        return error_handler.exit_code_for(exc)
    logger.info(f"🔄 {args.command}: job {config.name!r}, output {config.output_dir}")
    return run(args.command, config)


if __name__ == "__main__":
    sys.exit(main())
