"""Time integration of the conformal Ricci flow and the heat equations riding on it.

evolve_flow         RK4 on the metric, pressure re-solved at every stage
solve_conjugate_heat  backward pass for the weighted density H sqrt(det g)
solve_heat          forward heat equation v_t = Delta v + p_bar v
solve_forced_heat   forward heat with a bounded forcing p_bar (a v + b |grad v|)
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.interpolate import CubicSpline

from src.config import BLOWUP_LIMIT, DIM, M, SAFETY
from src.elliptic import EllipticConfig, PressureViolation, SolverError, p_bar, solve_pressure, solve_pressure_general
from src.guardrails import atomic_write_bytes, relative_residual, require_positive
from src.tensor_grid import (
    Grid,
    MetricError,
    MetricField,
    StiffnessOperator,
    grad_norm_sq,
    pack_sym,
    ricci,
    scalar_curvature,
    scalar_from_preset,
    tensor_norm_sq,
)

logger = logging.getLogger(__name__)

TERMINAL_PRESETS = ("uniform", "bump", "mode")

# Scalar curvature the model fixes: R_g = -m(m+1)
MODEL_R0 = -float(M * (M + 1))


class FlowAbort(RuntimeError):
    """Time stepping broke down; `time` is the last time reached."""

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class StepPolicy:
    """dt = safety * spacing^2 / max trace(g^ij), optionally capped by max_dt."""

    safety: float = SAFETY
    max_dt: float | None = None

    def __post_init__(self):
        if not self.safety > 0.0:
            raise ValueError(f"safety must be positive, got {self.safety}")
        if self.max_dt is not None and not self.max_dt > 0.0:
            raise ValueError(f"max_dt must be positive, got {self.max_dt}")

    def dt(self, metric: MetricField) -> float:
        trace = np.einsum("ii...->...", metric.inverse)
        step = self.safety * metric.grid.spacing ** 2 / float(np.max(trace))
        return step if self.max_dt is None else min(step, self.max_dt)


@dataclass(frozen=True)
class FlowState:
    t: float
    g: np.ndarray  # packed symmetric components, shape (6, N, N, N)
    p: np.ndarray
    p_bar: float
    R: np.ndarray
    ricci_norm_max: float  # K^2 = max over nodes of |Ric|^2_g


@dataclass(frozen=True)
class HeatForcing:
    """Forcing p_bar (a v + b |grad v|) with |a|, |b| <= 1."""

    a: float = 1.0
    b: float = 0.0
    active: bool = True

    def __post_init__(self):
        if abs(self.a) > 1.0 or abs(self.b) > 1.0:
            raise ValueError(f"forcing coefficients must satisfy |a|, |b| <= 1 (got a={self.a}, b={self.b})")

    def source(self, v: np.ndarray, metric: MetricField, pbar: float) -> np.ndarray:
        return pbar * (self.a * v + self.b * np.sqrt(grad_norm_sq(v, metric)))


@dataclass(frozen=True)
class FlowHistory:
    grid: Grid
    states: tuple[FlowState, ...]
    T: float
    r0: float | None = None
    H: tuple[np.ndarray, ...] | None = None
    v: tuple[np.ndarray, ...] | None = None
    forcing: HeatForcing | None = None
    certificate: tuple[float, ...] | None = None
    diagnostics: Mapping = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def p_bars(self) -> np.ndarray:
        return np.array([s.p_bar for s in self.states])

    @property
    def effective_r0(self) -> float:
        return MODEL_R0 if self.r0 is None else self.r0

    def since(self, i: int) -> "FlowHistory":
        """The stored run from step i on; T and diagnostics are kept."""
        if not 0 <= i < len(self) - 1:
            raise ValueError(f"step {i} leaves fewer than two steps of the run")

        def tail(values):
            return None if values is None else tuple(values[i:])

        return dataclasses.replace(self, states=self.states[i:], H=tail(self.H), v=tail(self.v),
                                   certificate=tail(self.certificate))

    def metric(self, i: int) -> MetricField:
        return MetricField.from_packed(self.states[i].g, self.grid)

    def dmu(self, i: int) -> np.ndarray:
        """Density of d mu = sqrt(det g) cellvol at step i."""
        return self.metric(i).sqrt_det

    def dV(self, i: int) -> np.ndarray:
        """Density of dV = H d mu at step i."""
        if self.H is None:
            raise ValueError("history has no conjugate density; run solve_conjugate_heat first")
        return self.H[i] * self.dmu(i)

    def mass(self, i: int) -> float:
        return float(np.sum(self.dV(i))) * self.grid.cell_volume

    def tau(self, i: int) -> float:
        return self.T - self.states[i].t

    def volume_rate(self, i: int) -> np.ndarray:
        """-(d/dt) log sqrt(det g) = R - R0 + n p, from the trace of the flow."""
        state = self.states[i]
        return state.R - self.effective_r0 + DIM * state.p

    def forcing_term(self, i: int, metric: MetricField | None = None) -> np.ndarray:
        """(d_t - Delta) v at step i."""
        if self.v is None:
            raise ValueError("history has no heat solution")
        metric = metric or self.metric(i)
        pbar = self.states[i].p_bar
        if self.forcing is None:
            return pbar * self.v[i]
        return self.forcing.source(self.v[i], metric, pbar)

    def heat_rate(self, i: int, metric: MetricField | None = None) -> np.ndarray:
        """d_t v at step i from the semi-discrete heat equation."""
        metric = metric or self.metric(i)
        lap = -StiffnessOperator.for_metric(metric).apply(self.v[i]) / metric.sqrt_det
        return lap + self.forcing_term(i, metric)

    def density_rate(self, i: int, metric: MetricField | None = None) -> np.ndarray:
        """d_t (H sqrt det g) = -(Delta H) sqrt det g at step i."""
        metric = metric or self.metric(i)
        return StiffnessOperator.for_metric(metric).apply(self.H[i])


def crf_rhs(metric: MetricField, p: np.ndarray, ric: np.ndarray | None = None,
            r0: float | None = None) -> np.ndarray:
    """-2(Ric + (m+p) g), or -2(Ric - (R0/n) g) - 2 p g for a general R0."""
    if ric is None:
        ric = ricci(metric)
    if r0 is None:
        return -2.0 * (ric + (M + p) * metric.g)
    return -2.0 * (ric - (r0 / DIM) * metric.g) - 2.0 * p * metric.g


def time_derivative(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """d/dt of a series sampled on step times (leading axis), fourth order when possible."""
    values = np.asarray(values, dtype=float)
    if len(times) >= 4:
        return CubicSpline(times, values, axis=0).derivative()(times)
    return np.gradient(values, times, axis=0)


def _metric_or_abort(packed: np.ndarray, grid: Grid, t: float) -> MetricField:
    try:
        return MetricField.from_packed(packed, grid)
    except MetricError as exc:
        raise FlowAbort(f"metric lost positive definiteness at t={t:.6g}: {exc}", t) from exc


def _pressure(metric: MetricField, cfg: EllipticConfig, r0: float | None, ric: np.ndarray,
              x0: np.ndarray | None, t: float) -> np.ndarray:
    try:
        if r0 is None:
            return solve_pressure(metric, cfg, ric=ric, x0=x0)
        return solve_pressure_general(metric, r0, cfg, ric=ric, x0=x0)
    except (SolverError, PressureViolation) as exc:
        raise FlowAbort(f"pressure solve failed at t={t:.6g}: {exc}", t) from exc


def _state(t: float, packed: np.ndarray, metric: MetricField, ric: np.ndarray, p: np.ndarray) -> FlowState:
    return FlowState(t=t, g=packed, p=p, p_bar=p_bar(p), R=scalar_curvature(metric, ric),
                     ricci_norm_max=float(np.max(tensor_norm_sq(ric, metric))))


def evolve_flow(g0: MetricField, T: float, policy: StepPolicy | None = None,
                cfg: EllipticConfig | None = None, r0: float | None = None) -> FlowHistory:
    """Integrate d_t g = -2(Ric + (m+p) g) on [0, T], storing every accepted step."""
    if not T > 0.0:
        raise ValueError(f"final time must be positive, got {T}")
    policy = policy or StepPolicy()
    cfg = cfg or EllipticConfig()
    grid = g0.grid

    def stage(packed: np.ndarray, t: float, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        metric = _metric_or_abort(packed, grid, t)
        ric = ricci(metric)
        p = _pressure(metric, cfg, r0, ric, x0, t)
        return pack_sym(crf_rhs(metric, p, ric, r0)), p

    metric = g0
    ric = ricci(metric)
    p = _pressure(metric, cfg, r0, ric, None, 0.0)
    t = 0.0
    packed = g0.packed()
    states = [_state(t, packed, metric, ric, p)]
    rate = pack_sym(crf_rhs(metric, p, ric, r0))

    while t < T:
        dt = policy.dt(metric)
        if t + dt >= T * (1.0 - 1e-12):
            dt = T - t
        k1 = rate
        k2, p2 = stage(packed + 0.5 * dt * k1, t + 0.5 * dt, p)
        k3, p3 = stage(packed + 0.5 * dt * k2, t + 0.5 * dt, p2)
        k4, _ = stage(packed + dt * k3, t + dt, p3)
        packed = packed + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = T if T - (t + dt) <= 1e-12 * T else t + dt

        metric = _metric_or_abort(packed, grid, t)
        ric = ricci(metric)
        p = _pressure(metric, cfg, r0, ric, p, t)
        rate = pack_sym(crf_rhs(metric, p, ric, r0))
        states.append(_state(t, packed, metric, ric, p))
        logger.debug("flow step %d: t=%.6g dt=%.3e p_bar=%.6g", len(states) - 1, t, dt, states[-1].p_bar)

    history = FlowHistory(grid=grid, states=tuple(states), T=T, r0=r0)
    residual = measure_residual(history)
    logger.info("Flow reached T=%g in %d steps (measure identity residual %.3e)", T, len(states) - 1, residual)
    return dataclasses.replace(history, diagnostics={"measure_residual": residual})


def measure_residual(history: FlowHistory) -> float:
    """Relative residual of d_t sqrt(det g) + (R - R0 + n p) sqrt(det g) = 0."""
    if len(history) < 2:
        return 0.0
    densities = np.stack([history.dmu(i) for i in range(len(history))])
    lhs = time_derivative(history.times, densities)
    rhs = -np.stack([history.volume_rate(i) for i in range(len(history))]) * densities
    return relative_residual(lhs, rhs)


def terminal_density(preset: str, params: Mapping, grid: Grid) -> np.ndarray:
    if preset not in TERMINAL_PRESETS:
        raise ValueError(f"unknown terminal density {preset!r} (expected one of {', '.join(TERMINAL_PRESETS)})")
    H = scalar_from_preset(preset, params, grid)
    require_positive("terminal H", H)
    return H


def solve_conjugate_heat(history: FlowHistory, terminal_H: np.ndarray) -> FlowHistory:
    """Backward pass for dV = H d mu with d_t dV = -(Delta H / H) dV.

    The density rho = H sqrt(det g) is marched in s = T - t by
    d_s rho = -K_g (rho / sqrt det g), which conserves int dV exactly.
    """
    require_positive("terminal H", terminal_H)
    grid = history.grid
    times = history.times
    last = len(history) - 1

    hi = history.metric(last)
    rho = terminal_H * hi.sqrt_det
    rho = rho / (float(np.sum(rho)) * grid.cell_volume)
    H_steps: list[np.ndarray] = [None] * len(history)
    H_steps[last] = rho / hi.sqrt_det

    def rate(density: np.ndarray, metric: MetricField, stiffness: StiffnessOperator) -> np.ndarray:
        return -stiffness.apply(density / metric.sqrt_det)

    hi_stiffness = StiffnessOperator.for_metric(hi)
    drift = 0.0
    for i in range(last - 1, -1, -1):
        ds = times[i + 1] - times[i]
        lo = history.metric(i)
        mid = MetricField.from_packed(0.5 * (history.states[i].g + history.states[i + 1].g), grid)
        lo_stiffness = StiffnessOperator.for_metric(lo)
        mid_stiffness = StiffnessOperator.for_metric(mid)

        k1 = rate(rho, hi, hi_stiffness)
        k2 = rate(rho + 0.5 * ds * k1, mid, mid_stiffness)
        k3 = rate(rho + 0.5 * ds * k2, mid, mid_stiffness)
        k4 = rate(rho + ds * k3, lo, lo_stiffness)
        rho = rho + (ds / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        H = rho / lo.sqrt_det
        if not np.all(np.isfinite(H)) or float(np.min(H)) <= 0.0:
            raise FlowAbort(f"conjugate density lost positivity at t={times[i]:.6g}", float(times[i]))
        if float(np.max(H)) > BLOWUP_LIMIT:
            raise FlowAbort(f"conjugate density blew up at t={times[i]:.6g}", float(times[i]))
        H_steps[i] = H
        drift = max(drift, abs(float(np.sum(rho)) * grid.cell_volume - 1.0))
        hi, hi_stiffness = lo, lo_stiffness

    logger.info("Conjugate pass done over %d steps (mass drift %.3e)", last, drift)
    diagnostics = {**history.diagnostics, "mass_drift": drift}
    return dataclasses.replace(history, H=tuple(H_steps), diagnostics=diagnostics)


def _march_heat(history: FlowHistory, v0: np.ndarray, forcing: HeatForcing | None) -> FlowHistory:
    grid = history.grid
    times = history.times
    pbars = history.p_bars
    v = np.array(v0, dtype=float)
    if v.shape != grid.shape or not np.all(np.isfinite(v)):
        raise ValueError("initial heat data must be a finite field on the grid")

    def rate(u: np.ndarray, metric: MetricField, stiffness: StiffnessOperator, pbar: float) -> np.ndarray:
        lap = -stiffness.apply(u) / metric.sqrt_det
        if forcing is None:
            return lap + pbar * u
        return lap + forcing.source(u, metric, pbar)

    lo = history.metric(0)
    lo_stiffness = StiffnessOperator.for_metric(lo)
    steps = [v]
    for i in range(len(history) - 1):
        dt = times[i + 1] - times[i]
        hi = history.metric(i + 1)
        mid = MetricField.from_packed(0.5 * (history.states[i].g + history.states[i + 1].g), grid)
        hi_stiffness = StiffnessOperator.for_metric(hi)
        mid_stiffness = StiffnessOperator.for_metric(mid)
        pbar_mid = 0.5 * (pbars[i] + pbars[i + 1])

        k1 = rate(v, lo, lo_stiffness, pbars[i])
        k2 = rate(v + 0.5 * dt * k1, mid, mid_stiffness, pbar_mid)
        k3 = rate(v + 0.5 * dt * k2, mid, mid_stiffness, pbar_mid)
        k4 = rate(v + dt * k3, hi, hi_stiffness, pbars[i + 1])
        v = v + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

        if not np.all(np.isfinite(v)) or float(np.max(np.abs(v))) > BLOWUP_LIMIT:
            raise FlowAbort(f"heat solution blew up at t={times[i + 1]:.6g}", float(times[i + 1]))
        steps.append(v)
        lo, lo_stiffness = hi, hi_stiffness

    history = dataclasses.replace(history, v=tuple(steps), forcing=forcing)
    certificate = tuple(_certificate(history, i) for i in range(len(history)))
    logger.info("Heat pass done over %d steps (max certificate %.3e)", len(history) - 1, max(certificate))
    return dataclasses.replace(history, certificate=certificate)


def _certificate(history: FlowHistory, i: int) -> float:
    """max(|(d_t - Delta) v| - p_bar (|v| + |grad v|)) at step i; <= 0 when the forcing bound holds."""
    metric = history.metric(i)
    v = history.v[i]
    bound = history.states[i].p_bar * (np.abs(v) + np.sqrt(grad_norm_sq(v, metric)))
    return float(np.max(np.abs(history.forcing_term(i, metric)) - bound))


def solve_heat(history: FlowHistory, v0: np.ndarray) -> FlowHistory:
    """v_t = Delta_g(t) v + p_bar(t) v along the stored flow."""
    return _march_heat(history, v0, None)


def solve_forced_heat(history: FlowHistory, v0: np.ndarray, forcing: HeatForcing) -> FlowHistory:
    """v_t = Delta_g(t) v + p_bar(t)(a v + b |grad v|) along the stored flow."""
    if not forcing.active:
        forcing = HeatForcing(0.0, 0.0)
    return _march_heat(history, v0, forcing)


def dump_snapshots(history: FlowHistory, path: Path) -> None:
    """Little-endian float64 records, one per step: t, g (6 components), p, H, v.

    Missing H or v are written as NaN so every record has the same length.
    """
    gaps = np.full(history.grid.shape, np.nan)
    chunks = []
    for i, state in enumerate(history.states):
        chunks.append(np.array([state.t], dtype="<f8").tobytes())
        for block in (state.g, state.p,
                      history.H[i] if history.H is not None else gaps,
                      history.v[i] if history.v is not None else gaps):
            chunks.append(np.ascontiguousarray(block).astype("<f8").tobytes())
    atomic_write_bytes(Path(path), b"".join(chunks))
    logger.info("Wrote %d snapshots to %s", len(history), path)
