"""Scenario files: dotenv-style KEY=value lists validated into a ScenarioConfig.

Bare names resolve to bundled files in SCENARIO_DIR (`flat-rigidity` ->
scenarios/flat-rigidity.env). Preset parameters are written as
`name=value` pairs separated by `;`, with tuple values comma separated:

    HEAT_V0_PARAMS=k=1,0,0; amplitude=1.0
"""

import dataclasses
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from dotenv import dotenv_values

from src.auditor import CONVERGENCE_SCENARIOS
from src.config import FD_ORDER, OUTPUT_DIR, SAFETY, SCENARIO_DIR
from src.flow import TERMINAL_PRESETS
from src.frequency import WEIGHT_PRESETS, TimeWeight
from src.tensor_grid import METRIC_PRESETS, SCALAR_PRESETS

logger = logging.getLogger(__name__)

# Heat data taken from the first nonzero eigenpair of -L_f at the window start
EIGENFUNCTION_DATA = "eigenfunction"
HEAT_PRESETS = (*SCALAR_PRESETS, EIGENFUNCTION_DATA)

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


class ConfigError(ValueError):
    """A scenario file is missing, malformed or inconsistent."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = ""
        if field is not None:
            where = f"{field}: " if line is None else f"line {line}, {field}: "
        super().__init__(f"{where}{message}")
        self.field = field
        self.line = line


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    # grid
    n: int = 16
    fd_order: int = FD_ORDER
    # flow
    T: float = 0.1
    safety: float = SAFETY
    max_dt: float | None = None
    r0: float | None = None
    elliptic_tolerance: float = 1e-10
    metric_preset: str = "flat"
    metric_params: dict = field(default_factory=dict)
    # heat
    v0_preset: str = "fourier"
    v0_params: dict = field(default_factory=dict)
    forcing: bool = False
    forcing_a: float = 1.0
    forcing_b: float = 0.0
    # conjugate density and window
    terminal_preset: str = "uniform"
    terminal_params: dict = field(default_factory=dict)
    t0: float = 0.01
    t1: float = 0.09
    # weights
    h_preset: str = "constant"
    h_params: tuple[float, ...] = (1.0,)
    k_preset: str = "auto"
    k_params: tuple[float, ...] = ()
    # checks and tolerances
    eps_rel: float = 1e-4
    tol_identity: float = 1e-3
    tol_measure: float = 1e-6
    tol_mass: float = 1e-8
    tol_rigidity: float = 1e-3
    tol_eigen: float = 1e-4
    tol_backward: float = 1e-6
    tol_growth: float = 1e-4
    tol_selfadjoint: float = 1e-12
    check_eigen: bool = True
    eigen_stride: int = 10
    converge_study: str | None = None
    converge_sizes: tuple[int, ...] = (16, 32, 64)
    converge_steps: tuple[float, ...] = (0.02, 0.01, 0.005)
    seed: int = 0
    # output
    output_dir: Path = OUTPUT_DIR
    plots: bool = True
    plot_timestamps: bool = False

    @property
    def weights(self) -> TimeWeight:
        return TimeWeight(h_preset=self.h_preset, h_params=self.h_params, k_preset=self.k_preset,
                          k_params=self.k_params, t0=self.t0, t1=self.t1)

    def seeded(self, params: dict) -> dict:
        """Preset params with the scenario seed filled in where none is given."""
        return {"seed": self.seed, **params}

    def echo(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["output_dir"] = str(self.output_dir)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


# KEY -> (field, parser name)
_KEYS = {
    "GRID_N": ("n", "int"),
    "FD_ORDER": ("fd_order", "int"),
    "FLOW_T": ("T", "float"),
    "FLOW_SAFETY": ("safety", "float"),
    "FLOW_MAX_DT": ("max_dt", "optional_float"),
    "FLOW_R0": ("r0", "optional_float"),
    "ELLIPTIC_TOLERANCE": ("elliptic_tolerance", "float"),
    "METRIC_PRESET": ("metric_preset", "str"),
    "METRIC_PARAMS": ("metric_params", "params"),
    "HEAT_V0": ("v0_preset", "str"),
    "HEAT_V0_PARAMS": ("v0_params", "params"),
    "HEAT_FORCING": ("forcing", "bool"),
    "FORCING_A": ("forcing_a", "float"),
    "FORCING_B": ("forcing_b", "float"),
    "TERMINAL_H": ("terminal_preset", "str"),
    "TERMINAL_H_PARAMS": ("terminal_params", "params"),
    "WINDOW_T0": ("t0", "float"),
    "WINDOW_T1": ("t1", "float"),
    "WEIGHT_H": ("h_preset", "str"),
    "WEIGHT_H_PARAMS": ("h_params", "floats"),
    "WEIGHT_K": ("k_preset", "str"),
    "WEIGHT_K_PARAMS": ("k_params", "floats"),
    "EPS_REL": ("eps_rel", "float"),
    "TOL_IDENTITY": ("tol_identity", "float"),
    "TOL_MEASURE": ("tol_measure", "float"),
    "TOL_MASS": ("tol_mass", "float"),
    "TOL_RIGIDITY": ("tol_rigidity", "float"),
    "TOL_EIGEN": ("tol_eigen", "float"),
    "TOL_BACKWARD": ("tol_backward", "float"),
    "TOL_GROWTH": ("tol_growth", "float"),
    "TOL_SELFADJOINT": ("tol_selfadjoint", "float"),
    "CHECK_EIGEN": ("check_eigen", "bool"),
    "EIGEN_STRIDE": ("eigen_stride", "int"),
    "CONVERGE_STUDY": ("converge_study", "optional_str"),
    "CONVERGE_SIZES": ("converge_sizes", "ints"),
    "CONVERGE_STEPS": ("converge_steps", "floats"),
    "SEED": ("seed", "int"),
    "OUTPUT_DIR": ("output_dir", "path"),
    "PLOTS": ("plots", "bool"),
    "PLOT_TIMESTAMPS": ("plot_timestamps", "bool"),
}


def _number(text: str) -> int | float:
    try:
        return int(text)
    except ValueError:
        return float(text)


def _parse_params(text: str) -> dict:
    params = {}
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        name, sep, value = chunk.partition("=")
        if not sep or not name.strip():
            raise ValueError(f"expected name=value, got {chunk!r}")
        parts = [p.strip() for p in value.split(",")]
        params[name.strip()] = tuple(_number(p) for p in parts) if len(parts) > 1 else _number(parts[0])
    return params


def _parse(kind: str, text: str):
    text = text.strip()
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "optional_float":
        return None if text.lower() in ("", "none") else float(text)
    if kind == "str":
        return text
    if kind == "optional_str":
        return None if text.lower() in ("", "none", "all") else text
    if kind == "bool":
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind == "params":
        return _parse_params(text)
    if kind == "floats":
        return tuple(float(p) for p in text.split(",") if p.strip())
    if kind == "ints":
        return tuple(int(p) for p in text.split(",") if p.strip())
    if kind == "path":
        return Path(text)
    raise AssertionError(kind)


def _line_numbers(text: str) -> dict[str, int]:
    lines = {}
    for number, line in enumerate(text.splitlines(), start=1):
        match = re.match(r"\s*(?:export\s+)?([A-Za-z_][A-Za-z0-9_]*)\s*=", line)
        if match:
            lines.setdefault(match.group(1), number)
    return lines


def resolve_scenario(name_or_path: str | Path) -> Path:
    candidate = Path(name_or_path)
    if candidate.is_file():
        return candidate
    bundled = SCENARIO_DIR / f"{name_or_path}.env"
    if bundled.is_file():
        return bundled
    raise ConfigError(f"no scenario file {candidate} and no bundled scenario {bundled.name} in {SCENARIO_DIR}")


def load_scenario(name_or_path: str | Path) -> ScenarioConfig:
    path = resolve_scenario(name_or_path)
    text = path.read_text(encoding="utf-8")
    lines = _line_numbers(text)
    raw = dotenv_values(path, encoding="utf-8")

    values: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in _KEYS:
            raise ConfigError("unknown key", field=key, line=lines.get(key))
        target, kind = _KEYS[key]
        try:
            values[target] = _parse(kind, value or "")
        except ValueError as exc:
            raise ConfigError(str(exc), field=key, line=lines.get(key)) from exc

    name = path.stem if path.suffix == ".env" else path.name
    config = ScenarioConfig(name=name, **values)
    fields = {target: key for key, (target, _) in _KEYS.items()}

    def fail(message: str, target: str):
        key = fields[target]
        raise ConfigError(message, field=key, line=lines.get(key))

    validate(config, fail)
    logger.info("Loaded scenario %s from %s", config.name, path)
    return config


def validate(config: ScenarioConfig, fail=None) -> None:
    """Cross-field checks; `fail(message, field_name)` must raise."""
    if fail is None:
        def fail(message: str, target: str):
            raise ConfigError(message, field=target)

    if config.n < 8:
        fail(f"grid needs at least 8 nodes per axis, got {config.n}", "n")
    if config.fd_order not in (2, 4):
        fail(f"stencil order must be 2 or 4, got {config.fd_order}", "fd_order")
    if not config.T > 0.0:
        fail(f"final time must be positive, got {config.T}", "T")
    if not config.safety > 0.0:
        fail(f"safety factor must be positive, got {config.safety}", "safety")
    if config.max_dt is not None and not config.max_dt > 0.0:
        fail(f"max_dt must be positive, got {config.max_dt}", "max_dt")
    if config.r0 is not None and not config.r0 < 0.0:
        fail(f"R0 must be negative, got {config.r0}", "r0")
    if config.metric_preset not in METRIC_PRESETS:
        fail(f"unknown metric preset {config.metric_preset!r}", "metric_preset")
    if config.v0_preset not in HEAT_PRESETS:
        fail(f"unknown heat data preset {config.v0_preset!r}", "v0_preset")
    if config.terminal_preset not in TERMINAL_PRESETS:
        fail(f"unknown terminal density preset {config.terminal_preset!r}", "terminal_preset")
    if abs(config.forcing_a) > 1.0:
        fail(f"|a| must not exceed 1, got {config.forcing_a}", "forcing_a")
    if abs(config.forcing_b) > 1.0:
        fail(f"|b| must not exceed 1, got {config.forcing_b}", "forcing_b")
    if not config.t0 > 0.0:
        fail(f"window start must be positive, got {config.t0}", "t0")
    if not config.t0 < config.t1:
        fail(f"window start t0={config.t0} must precede t1={config.t1}", "t0")
    if config.t1 > config.T:
        fail(f"window end t1={config.t1} exceeds the final time {config.T}", "t1")
    if config.h_preset not in WEIGHT_PRESETS:
        fail(f"unknown h preset {config.h_preset!r}", "h_preset")
    if config.k_preset != "auto" and config.k_preset not in WEIGHT_PRESETS:
        fail(f"unknown k preset {config.k_preset!r}", "k_preset")
    for target, preset, params in (("h_params", config.h_preset, config.h_params),
                                   ("k_params", config.k_preset, config.k_params)):
        if preset in WEIGHT_PRESETS and len(params) != WEIGHT_PRESETS[preset]:
            fail(f"preset {preset!r} takes {WEIGHT_PRESETS[preset]} parameter(s), got {len(params)}", target)
    ends = config.weights.h([config.t0, config.t1])
    if not (ends[0] * ends[1] > 0.0):
        fail("h must keep one sign on the window", "h_params")
    if config.eigen_stride < 1:
        fail(f"eigen stride must be at least 1, got {config.eigen_stride}", "eigen_stride")
    if config.converge_study is not None and config.converge_study not in CONVERGENCE_SCENARIOS:
        fail(f"unknown refinement study {config.converge_study!r}", "converge_study")
    if len(config.converge_sizes) < 2:
        fail("a refinement study needs at least two grid sizes", "converge_sizes")
    if len(config.converge_steps) < 2:
        fail("a refinement study needs at least two time steps", "converge_steps")
