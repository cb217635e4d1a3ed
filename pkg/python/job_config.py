"""
Job Configuration
=================

JSON job files (schema version 1) parsed into frozen dataclasses. Every
section rejects unknown keys with the dotted path of the offending key, and
all ranges are validated before any computation starts.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

from error_handler import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STRATEGIES = ("explicit", "one-at-a-time", "scaled-sound", "box-corners")
OBJECTIVES = ("none", "min-trace", "min-trace-X+max-trace-Y")
BACKENDS = ("CLARABEL", "SCS")
SIGNAL_KINDS = ("zero", "constant", "sines", "table")
SCENARIO_KINDS = ("open-loop", "reduction", "observer", "closed-loop")
CONTROLLERS = ("lqg", "hinf")
CHECKS = ("ies", "observability", "error_bound", "ges", "gain")

Matrix = Tuple[Tuple[float, ...], ...]


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------

def _path(parent: str, key: Union[str, int]) -> str:
    if isinstance(key, int):
        return f"{parent}[{key}]"
    return f"{parent}.{key}" if parent else key


def _mapping(data: Any, path: str, cls) -> Mapping[str, Any]:
    """Check that data is an object whose keys are all fields of cls"""
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    allowed = {f.name for f in fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {_path(path, key)!r} (allowed: {', '.join(sorted(allowed))})")
    return data


def _number(value: Any, path: str, minimum: Optional[float] = None, strict: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"{path}: expected a finite number, got {value!r}")
    if minimum is not None and (value <= minimum if strict else value < minimum):
        raise ConfigError(f"{path}: must be {'>' if strict else '>='} {minimum}, got {value}")
    return float(value)


def _integer(value: Any, path: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value}")
    return value


def _boolean(value: Any, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{path}: expected true or false, got {value!r}")
    return value


def _string(value: Any, path: str, choices: Optional[Sequence[str]] = None) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    if choices is not None and value not in choices:
        raise ConfigError(f"{path}: must be one of {', '.join(choices)}, got {value!r}")
    return value


def _vector(value: Any, path: str) -> Tuple[float, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}: expected a list of numbers")
    return tuple(_number(v, _path(path, i)) for i, v in enumerate(value))


def _matrix(value: Any, path: str) -> Matrix:
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(f"{path}: expected a non-empty list of rows")
    rows = tuple(_vector(row, _path(path, i)) for i, row in enumerate(value))
    if len({len(row) for row in rows}) != 1 or not rows[0]:
        raise ConfigError(f"{path}: rows must be non-empty and of equal length")
    return rows


def _optional(data: Mapping[str, Any], key: str, path: str, parse, default=None):
    value = data.get(key)
    return default if value is None else parse(value, _path(path, key))


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlantSpec:
    builtin: Optional[str] = None
    params: Tuple[Tuple[str, float], ...] = ()
    f: Tuple[str, ...] = ()
    B: Optional[Matrix] = None
    C: Optional[Matrix] = None
    epsilon: float = 0.01
    domain: Optional[Matrix] = None
    shift_equilibrium: bool = False
    u_star: Optional[Tuple[float, ...]] = None

    @classmethod
    def parse(cls, data: Any, path: str = "plant") -> "PlantSpec":
        data = _mapping(data, path, cls)
        builtin = _optional(data, "builtin", path, _string)
        f_raw = data.get("f")
        if (builtin is None) == (f_raw is None):
            raise ConfigError(f"{path}: give exactly one of 'builtin' or 'f'")
        params: Tuple[Tuple[str, float], ...] = ()
        if "params" in data and data["params"] is not None:
            raw = data["params"]
            if isinstance(raw, Mapping):
                raw = list(raw.items())
            params = tuple(sorted((_string(k, _path(path, "params")), _param(v, _path(_path(path, "params"), k)))
                                  for k, v in raw))
        f: Tuple[str, ...] = ()
        B = C = None
        if f_raw is not None:
            if isinstance(f_raw, str):
                f_raw = [f_raw]
            f = tuple(_string(v, _path(_path(path, "f"), i)) for i, v in enumerate(f_raw))
            if "B" not in data or "C" not in data:
                raise ConfigError(f"{path}: expression plants need 'B' and 'C'")
            B = _matrix(data["B"], _path(path, "B"))
            C = _matrix(data["C"], _path(path, "C"))
        domain = _optional(data, "domain", path, _domain)
        return cls(builtin, params, f, B, C,
                   _optional(data, "epsilon", path, lambda v, p: _number(v, p, 0.0), 0.01),
                   domain,
                   _optional(data, "shift_equilibrium", path, _boolean, False),
                   _optional(data, "u_star", path, _vector))

    @property
    def param_dict(self) -> Dict[str, float]:
        return dict(self.params)


def _param(value: Any, path: str):
    if isinstance(value, bool):
        return value
    if isinstance(value, int):
        return value
    return _number(value, path)


def _domain(value: Any, path: str) -> Matrix:
    """Rows [lo, hi]; null bounds mean unbounded"""
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}: expected a list of [lo, hi] intervals")
    rows = []
    for i, row in enumerate(value):
        p = _path(path, i)
        if not isinstance(row, (list, tuple)) or len(row) != 2:
            raise ConfigError(f"{p}: expected [lo, hi]")
        lo = -math.inf if row[0] is None else _number(row[0], _path(p, 0))
        hi = math.inf if row[1] is None else _number(row[1], _path(p, 1))
        if lo > hi:
            raise ConfigError(f"{p}: lower bound exceeds upper bound")
        rows.append((lo, hi))
    return tuple(rows)


@dataclass(frozen=True)
class VertexSpec:
    strategy: str = "scaled-sound"
    matrices: Optional[Tuple[Matrix, ...]] = None

    @classmethod
    def parse(cls, data: Any, path: str = "vertices") -> "VertexSpec":
        data = _mapping(data, path, cls)
        strategy = _optional(data, "strategy", path, lambda v, p: _string(v, p, STRATEGIES), "scaled-sound")
        matrices = None
        if data.get("matrices") is not None:
            raw = data["matrices"]
            if not isinstance(raw, (list, tuple)) or not raw:
                raise ConfigError(f"{path}.matrices: expected a non-empty list of matrices")
            matrices = tuple(_matrix(m, _path(_path(path, "matrices"), i)) for i, m in enumerate(raw))
        if strategy == "explicit" and matrices is None:
            raise ConfigError(f"{path}: strategy 'explicit' needs 'matrices'")
        return cls(strategy, matrices)


@dataclass(frozen=True)
class ReductionSpec:
    r: Union[int, str] = "auto"
    threshold: Optional[float] = None
    objective: str = "none"
    blocks: Optional[Tuple[int, ...]] = None
    block_orders: Optional[Tuple[int, ...]] = None

    @classmethod
    def parse(cls, data: Any, path: str = "reduction") -> "ReductionSpec":
        data = _mapping(data, path, cls)
        r = data.get("r", "auto")
        if r != "auto":
            r = _integer(r, _path(path, "r"), 1)
        threshold = _optional(data, "threshold", path, lambda v, p: _number(v, p, 0.0))
        blocks = _optional(data, "blocks", path, _int_list)
        block_orders = _optional(data, "block_orders", path, _int_list)
        if block_orders is not None and (blocks is None or len(blocks) != len(block_orders)):
            raise ConfigError(f"{path}: 'block_orders' needs 'blocks' of the same length")
        if blocks is not None and any(b < 1 for b in blocks):
            raise ConfigError(f"{path}.blocks: block sizes must be >= 1")
        return cls(r, threshold, _optional(data, "objective", path, lambda v, p: _string(v, p, OBJECTIVES), "none"),
                   blocks, block_orders)


def _int_list(value: Any, path: str) -> Tuple[int, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}: expected a list of integers")
    return tuple(_integer(v, _path(path, i)) for i, v in enumerate(value))


@dataclass(frozen=True)
class SolverSpec:
    backend: str = "CLARABEL"
    fallback_backend: Optional[str] = "SCS"
    margin: float = 1e-7
    tol: float = 1e-8
    max_iter: int = 5000
    retry: bool = True

    @classmethod
    def parse(cls, data: Any, path: str = "solver") -> "SolverSpec":
        data = _mapping(data, path, cls)
        fallback = data.get("fallback_backend", "SCS")
        if fallback is not None:
            fallback = _string(fallback, _path(path, "fallback_backend"), BACKENDS)
        return cls(_optional(data, "backend", path, lambda v, p: _string(v, p, BACKENDS), "CLARABEL"),
                   fallback,
                   _optional(data, "margin", path, lambda v, p: _number(v, p, 0.0), 1e-7),
                   _optional(data, "tol", path, lambda v, p: _number(v, p, 0.0, strict=True), 1e-8),
                   _optional(data, "max_iter", path, lambda v, p: _integer(v, p, 1), 5000),
                   _optional(data, "retry", path, _boolean, True))


@dataclass(frozen=True)
class HinfSpec:
    gamma: Optional[float] = None
    gamma_squared: Optional[float] = None
    orders: Tuple[int, ...] = ()
    override_spectral: bool = False
    improve_gamma: bool = False
    P_inf: Optional[Matrix] = None
    Q_inf: Optional[Matrix] = None

    @classmethod
    def parse(cls, data: Any, path: str = "hinf") -> "HinfSpec":
        data = _mapping(data, path, cls)
        gamma = _optional(data, "gamma", path, _number)
        gamma_squared = _optional(data, "gamma_squared", path, _number)
        if (gamma is None) == (gamma_squared is None):
            raise ConfigError(f"{path}: give exactly one of 'gamma' or 'gamma_squared'")
        value = gamma if gamma is not None else math.sqrt(max(gamma_squared, 0.0))
        if not value > 1.0:
            raise ConfigError(f"{path}: gamma must be > 1, got {value}")
        P = _optional(data, "P_inf", path, _matrix)
        Q = _optional(data, "Q_inf", path, _matrix)
        if (P is None) != (Q is None):
            raise ConfigError(f"{path}: 'P_inf' and 'Q_inf' are injected together")
        return cls(gamma, gamma_squared, _optional(data, "orders", path, _int_list, ()),
                   _optional(data, "override_spectral", path, _boolean, False),
                   _optional(data, "improve_gamma", path, _boolean, False), P, Q)

    @property
    def value(self) -> float:
        return self.gamma if self.gamma is not None else math.sqrt(self.gamma_squared)


@dataclass(frozen=True)
class SignalSpec:
    kind: str = "zero"
    values: Optional[Tuple[float, ...]] = None
    amplitudes: Optional[Tuple[float, ...]] = None
    frequencies: Optional[Tuple[float, ...]] = None
    phases: Optional[Tuple[float, ...]] = None
    direction: Optional[Tuple[float, ...]] = None
    times: Optional[Tuple[float, ...]] = None
    rows: Optional[Matrix] = None

    @classmethod
    def parse(cls, data: Any, path: str) -> "SignalSpec":
        data = _mapping(data, path, cls)
        kind = _string(data.get("kind", "zero"), _path(path, "kind"), SIGNAL_KINDS)
        spec = cls(kind, *(_optional(data, key, path, _vector)
                           for key in ("values", "amplitudes", "frequencies", "phases", "direction", "times")),
                   _optional(data, "rows", path, _matrix))
        required = {"constant": ("values",), "sines": ("amplitudes", "frequencies"),
                    "table": ("times", "rows")}.get(kind, ())
        for key in required:
            if getattr(spec, key) is None:
                raise ConfigError(f"{path}: {kind} signal needs {key!r}")
        return spec

    def to_signal_dict(self) -> Dict[str, object]:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    kind: str = "open-loop"
    input: SignalSpec = field(default_factory=SignalSpec)
    w_u: Optional[SignalSpec] = None
    w_y: Optional[SignalSpec] = None
    controller: str = "lqg"
    orders: Tuple[int, ...] = ()
    x0: Optional[Tuple[float, ...]] = None
    xc0: Optional[Tuple[float, ...]] = None

    @classmethod
    def parse(cls, data: Any, path: str) -> "ScenarioSpec":
        data = _mapping(data, path, cls)
        if "name" not in data:
            raise ConfigError(f"{path}: scenario needs a 'name'")
        name = _string(data["name"], _path(path, "name"))
        if not name or any(c in name for c in "/\\"):
            raise ConfigError(f"{path}.name: must be a plain file name stem")
        return cls(name,
                   _optional(data, "kind", path, lambda v, p: _string(v, p, SCENARIO_KINDS), "open-loop"),
                   _optional(data, "input", path, SignalSpec.parse, SignalSpec()),
                   _optional(data, "w_u", path, SignalSpec.parse),
                   _optional(data, "w_y", path, SignalSpec.parse),
                   _optional(data, "controller", path, lambda v, p: _string(v, p, CONTROLLERS), "lqg"),
                   _optional(data, "orders", path, _int_list, ()),
                   _optional(data, "x0", path, _vector),
                   _optional(data, "xc0", path, _vector))


@dataclass(frozen=True)
class SimulationSpec:
    dt: float = 1e-3
    T: float = 20.0
    scenarios: Tuple[ScenarioSpec, ...] = ()

    @classmethod
    def parse(cls, data: Any, path: str = "simulation") -> "SimulationSpec":
        data = _mapping(data, path, cls)
        dt = _optional(data, "dt", path, lambda v, p: _number(v, p, 0.0, strict=True), 1e-3)
        T = _optional(data, "T", path, _number, 20.0)
        if T < dt:
            raise ConfigError(f"{path}.T: horizon {T} is shorter than dt = {dt}")
        raw = data.get("scenarios") or []
        if not isinstance(raw, (list, tuple)):
            raise ConfigError(f"{path}.scenarios: expected a list")
        scenarios = tuple(ScenarioSpec.parse(s, _path(_path(path, "scenarios"), i)) for i, s in enumerate(raw))
        names = [s.name for s in scenarios]
        if len(set(names)) != len(names):
            raise ConfigError(f"{path}.scenarios: names must be unique")
        return cls(dt, T, scenarios)


@dataclass(frozen=True)
class VerificationSpec:
    checks: Tuple[str, ...] = CHECKS
    trials: int = 20
    ies_trials: int = 100
    T: Optional[float] = None
    error_bound_orders: Tuple[int, ...] = ()

    @classmethod
    def parse(cls, data: Any, path: str = "verification") -> "VerificationSpec":
        data = _mapping(data, path, cls)
        checks = CHECKS
        if data.get("checks") is not None:
            raw = data["checks"]
            if not isinstance(raw, (list, tuple)):
                raise ConfigError(f"{path}.checks: expected a list")
            checks = tuple(_string(v, _path(_path(path, "checks"), i), CHECKS) for i, v in enumerate(raw))
        return cls(checks,
                   _optional(data, "trials", path, lambda v, p: _integer(v, p, 1), 20),
                   _optional(data, "ies_trials", path, lambda v, p: _integer(v, p, 1), 100),
                   _optional(data, "T", path, lambda v, p: _number(v, p, 0.0, strict=True)),
                   _optional(data, "error_bound_orders", path, lambda v, p: _int_list(v, p), ()))


@dataclass(frozen=True)
class JobConfig:
    plant: PlantSpec
    schema_version: int = SCHEMA_VERSION
    name: str = "job"
    seed: int = 0
    output_dir: str = "out"
    vertices: VertexSpec = field(default_factory=VertexSpec)
    reduction: ReductionSpec = field(default_factory=ReductionSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    hinf: Optional[HinfSpec] = None
    simulation: SimulationSpec = field(default_factory=SimulationSpec)
    verification: VerificationSpec = field(default_factory=VerificationSpec)

    def to_dict(self) -> Dict[str, Any]:
        """Effective configuration with every default filled in"""
        return _plain(asdict(self))

    def with_overrides(self, output_dir: Optional[str] = None, seed: Optional[int] = None) -> "JobConfig":
        changes: Dict[str, Any] = {}
        if output_dir is not None:
            changes["output_dir"] = output_dir
        if seed is not None:
            if seed < 0 or seed >= 2 ** 64:
                raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
            changes["seed"] = seed
        return replace(self, **changes) if changes else self


def _plain(value: Any) -> Any:
    """Tuples to lists, infinite domain bounds to null, recursively"""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, float) and math.isinf(value):
        return None
    return value


def load_job_config(data: Any) -> JobConfig:
    """Validate a parsed JSON document and build the job"""
    data = _mapping(data, "", JobConfig)
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {version!r}, expected {SCHEMA_VERSION}")
    if "plant" not in data:
        raise ConfigError("plant: section is required")
    seed = _integer(data.get("seed", 0), "seed")
    if seed >= 2 ** 64:
        raise ConfigError("seed: must fit in 64 bits")
    config = JobConfig(
        plant=PlantSpec.parse(data["plant"]),
        schema_version=SCHEMA_VERSION,
        name=_string(data.get("name", "job"), "name"),
        seed=seed,
        output_dir=_string(data.get("output_dir", "out"), "output_dir"),
        vertices=_optional(data, "vertices", "", VertexSpec.parse, VertexSpec()),
        reduction=_optional(data, "reduction", "", ReductionSpec.parse, ReductionSpec()),
        solver=_optional(data, "solver", "", SolverSpec.parse, SolverSpec()),
        hinf=_optional(data, "hinf", "", HinfSpec.parse),
        simulation=_optional(data, "simulation", "", SimulationSpec.parse, SimulationSpec()),
        verification=_optional(data, "verification", "", VerificationSpec.parse, VerificationSpec()),
    )
    logger.debug(f"Loaded job {config.name!r} (schema v{SCHEMA_VERSION})")
    return config


def load_job_config_file(path: Union[str, Path]) -> JobConfig:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")
    return load_job_config(data)


def dump_json(data: Any, path: Union[str, Path]):
    """Deterministic JSON emission (insertion-ordered keys, repr floats, trailing newline)"""
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=2, allow_nan=True, default=_json_default)
        handle.write("\n")


def _json_default(value: Any) -> Any:
    """numpy scalars and arrays in report payloads"""
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"{value.__class__.__name__} is not JSON serializable")
