"""Scenario orchestration behind the CLI subcommands.

Each entry point returns an Outcome whose `passed` drives the exit code.
Runtime aborts (FlowAbort, SolverError, PressureViolation) flush whatever
artifacts the completed stages allow, with status "aborted", and re-raise.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from src.artifacts import (
    timeseries_rows,
    write_convergence_table,
    write_plots,
    write_report,
    write_timeseries,
)
from src.auditor import (
    CONVERGENCE_SCENARIOS,
    AuditResult,
    check_bochner,
    check_conjugate_equation,
    check_evolution_identities,
    check_measure_and_pressure,
    check_potential_equation,
    check_reilly,
    check_selfadjoint,
    convergence_study,
)
from src.elliptic import EllipticConfig, PressureViolation, SolverError
from src.flow import (
    FlowAbort,
    FlowHistory,
    HeatForcing,
    StepPolicy,
    evolve_flow,
    solve_conjugate_heat,
    solve_forced_heat,
    solve_heat,
    terminal_density,
)
from src.frequency import (
    CAUCHY_SCHWARZ_ROUNDOFF,
    TimeWeight,
    backward_uniqueness_bound,
    cauchy_schwarz_margin,
    check_I_derivative,
    compute_Q,
    eigen_monotonicity_check,
    eigenfunction_start,
    forced_growth_checks,
    monotonicity_report,
)
from src.scenario import EIGENFUNCTION_DATA, ConfigError, ScenarioConfig
from src.spectral import (
    EigenConfig,
    drift_eigenpair,
    gradient_rayleigh,
    nondivergence_residual,
    rayleigh_quotient,
)
from src.tensor_grid import Grid, MetricError, discrete_symbol, metric_from_preset, scalar_from_preset

logger = logging.getLogger(__name__)

RUNTIME_ABORTS = (FlowAbort, SolverError, PressureViolation)

_ORDER_TOLERANCE = 0.5

# Earliest remaining time tau = T - t at which the potential f is audited
_TAU_MIN_FRACTION = 0.5


@dataclass
class Outcome:
    status: str
    checks: list[AuditResult] = field(default_factory=list)
    payload: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == "completed" and all(c.passed for c in self.checks)


def check(name: str, residual: float, tolerance: float, passed: bool, **details) -> AuditResult:
    if not passed:
        logger.warning("%s failed: residual %.3e (tolerance %.1e)", name, residual, tolerance)
    return AuditResult(name=name, residual=float(residual), tolerance=float(tolerance), passed=bool(passed),
                       details=details)


def check_entries(checks: list[AuditResult]) -> list[dict[str, Any]]:
    return [{"name": c.name, "passed": c.passed, "residual": c.residual, "tolerance": c.tolerance,
             **({"slopes": list(c.slopes)} if c.slopes else {}), **dict(c.details)} for c in checks]


def output_dir_for(config: ScenarioConfig, override: Path | None = None) -> Path:
    base = override if override is not None else config.output_dir
    return Path(base) / config.name


# --- shared stages ----------------------------------------------------------

def run_weights(config: ScenarioConfig, history: FlowHistory) -> TimeWeight:
    """The scenario's weights, with the window starting no earlier than the stored run."""
    weights = config.weights
    if history.times[0] > weights.t0:
        weights = dataclasses.replace(weights, t0=float(history.times[0]))
    return weights


def initial_fields(config: ScenarioConfig):
    """Grid, initial metric, terminal density and heat data, with preset errors as ConfigError.

    Heat data taken from the drift eigenfunction is None here; it needs the
    conjugate density and is set in `simulate`.
    """
    grid = Grid(config.n, config.fd_order)
    try:
        g0 = metric_from_preset(config.metric_preset, config.seeded(config.metric_params), grid)
    except (MetricError, ValueError) as exc:
        raise ConfigError(str(exc), field="METRIC_PARAMS") from exc
    try:
        H_T = terminal_density(config.terminal_preset, config.terminal_params, grid)
    except ValueError as exc:
        raise ConfigError(str(exc), field="TERMINAL_H_PARAMS") from exc
    v0 = None
    if config.v0_preset != EIGENFUNCTION_DATA:
        try:
            v0 = scalar_from_preset(config.v0_preset, config.seeded(config.v0_params), grid)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), field="HEAT_V0_PARAMS") from exc
    return grid, g0, H_T, v0


def simulate(config: ScenarioConfig, stages: dict[str, FlowHistory]) -> FlowHistory:
    """Flow, backward conjugate pass and forward heat pass.

    `stages["history"]` holds the latest completed stage so an abort can
    still flush it.
    """
    _, g0, H_T, v0 = initial_fields(config)
    policy = StepPolicy(safety=config.safety, max_dt=config.max_dt)
    cfg = EllipticConfig(rel_tolerance=config.elliptic_tolerance)

    print(f">>> Evolving {config.metric_preset} metric on N={config.n} to T={config.T:g}")
    history = evolve_flow(g0, config.T, policy, cfg, r0=config.r0)
    stages["history"] = history
    print(f">>> Flow done in {len(history) - 1} steps; solving the conjugate heat equation")
    history = solve_conjugate_heat(history, H_T)
    stages["history"] = history
    if v0 is None:
        history, pair = eigenfunction_start(history, config.weights, EigenConfig(seed=config.seed))
        v0 = pair.u
        print(f">>> Heat data: eigenfunction at t={history.times[0]:.6g} (lambda={pair.eigenvalue:.12g})")
    if config.forcing:
        print(f">>> Forced heat pass (a={config.forcing_a:g}, b={config.forcing_b:g})")
        history = solve_forced_heat(history, v0, HeatForcing(config.forcing_a, config.forcing_b))
    else:
        print(">>> Heat pass")
        history = solve_heat(history, v0)
    stages["history"] = history
    return history


def audit_run(config: ScenarioConfig, history: FlowHistory) -> list[AuditResult]:
    checks = check_measure_and_pressure(history, mass_tolerance=config.tol_mass,
                                        measure_tolerance=config.tol_measure,
                                        density_tolerance=config.tol_identity)
    checks.append(check_conjugate_equation(history, tolerance=config.tol_identity))
    checks.append(check_potential_equation(history, tau_min=_TAU_MIN_FRACTION * config.T,
                                           tolerance=config.tol_identity))
    if not config.forcing or config.forcing_b == 0.0:
        checks.extend(check_evolution_identities(history, tolerance=config.tol_identity))
    else:
        checks.append(AuditResult(name="gradient-evolution", residual=0.0, tolerance=config.tol_identity,
                                  passed=True, details={"status": "not applicable (forcing has a |grad v| term)",
                                                        "enforced": False}))
    return checks


def frequency_checks(config: ScenarioConfig, history: FlowHistory) -> tuple[list[AuditResult], dict[str, Any]]:
    checks: list[AuditResult] = []
    weights = run_weights(config, history)
    report = compute_Q(history, weights, eps_rel=config.eps_rel)
    window = report.weights
    verdict = monotonicity_report(report, history)
    print(f">>> Frequency verdict: {verdict.verdict}")

    # forced runs are judged by the growth bounds instead
    enforced = verdict.asserted and not config.forcing
    checks.append(check("frequency-monotonicity", max(verdict.worst_rate, 0.0), verdict.eps_mono,
                        verdict.passed or not enforced, verdict=verdict.verdict, enforced=enforced,
                        hypothesis_met=window.hypothesis_met, sign=window.sign))
    if verdict.verdict == "constant" and verdict.rigidity_residual.size:
        worst = float(np.max(verdict.rigidity_residual))
        checks.append(check("rigidity-eigenfunction", worst, config.tol_rigidity, worst <= config.tol_rigidity,
                            c=verdict.rigidity_c))

    rate_check = None
    if not config.forcing:
        rate_check = check_I_derivative(history, report)
        checks.append(check("I-derivative", rate_check.max_residual, config.tol_identity,
                            rate_check.max_residual <= config.tol_identity,
                            time_difference_max=float(np.max(rate_check.finite_difference_residual))))

    margin = cauchy_schwarz_margin(report)
    checks.append(check("cauchy-schwarz-gap", max(0.0, -margin), CAUCHY_SCHWARZ_ROUNDOFF,
                        margin >= -CAUCHY_SCHWARZ_ROUNDOFF, min_gap=float(np.min(report.cauchy_schwarz_gap))))

    if window.sign < 0:
        bound = backward_uniqueness_bound(report, tolerance=config.tol_backward)
        checks.append(check("backward-uniqueness", max(0.0, -bound.residual), config.tol_backward, bound.passed,
                            a=bound.a, b=bound.b, margin=bound.residual, vacuous=bound.vacuous))

    if config.forcing:
        certificate = max(history.certificate)
        checks.append(check("forcing-certificate", max(certificate, 0.0), 1e-8, certificate <= 1e-8))
        if window.sign > 0:
            growth = forced_growth_checks(history, report, tolerance=config.tol_growth)
            worst = min((float(np.min(a)) for a in (growth.growth, growth.frequency_growth,
                                                    growth.log_frequency_growth, growth.gronwall) if a.size),
                        default=0.0)
            if np.isfinite(growth.lower_bound):
                worst = min(worst, growth.lower_bound)
            checks.append(check("forced-growth-bounds", max(0.0, -worst), config.tol_growth, growth.passed,
                                verdict=growth.verdict, skipped=growth.skipped, lower_bound=growth.lower_bound,
                                sharp_min=float(np.min(growth.frequency_growth_sharp))
                                if growth.frequency_growth_sharp.size else None))

    eigen = None
    if config.check_eigen and window.hypothesis_met:
        print(">>> Recomputing the drifting-Laplacian eigenvalue along the window")
        # Q enters the check only when v started as the eigenfunction of an unforced run
        chain = report if config.v0_preset == EIGENFUNCTION_DATA and not config.forcing else None
        eigen = eigen_monotonicity_check(history, weights, EigenConfig(seed=config.seed),
                                         stride=config.eigen_stride, tolerance=config.tol_eigen, report=chain)
        residual = max(0.0, -eigen.margin)
        if chain is not None:
            residual = max(residual, eigen.start_residual, -eigen.chain_margin)
        checks.append(check("eigenvalue-monotonicity", residual, config.tol_eigen, eigen.passed,
                            reference=eigen.reference, raw_monotone=eigen.raw_monotone,
                            start_residual=eigen.start_residual, chain_margin=eigen.chain_margin))

    data = {"report": report, "verdict": verdict, "eigen": eigen, "rate_check": rate_check}
    return checks, data


# --- subcommands ------------------------------------------------------------

def _flush(config: ScenarioConfig, out: Path, status: str, checks: list[AuditResult], history: FlowHistory | None,
           data: dict[str, Any], extra: dict[str, Any], report_name: str = "report.json") -> None:
    if history is not None:
        write_timeseries(out / "timeseries.csv",
                         timeseries_rows(history, data.get("report"), data.get("eigen"), data.get("rate_check")))
    verdict = data.get("verdict")
    payload = {
        "scenario": config.name,
        "status": status,
        "passed": status == "completed" and all(c.passed for c in checks),
        "config": config.echo(),
        "verdict": None if verdict is None else {
            "monotonicity": verdict.verdict,
            "asserted": verdict.asserted,
            "eps_mono": verdict.eps_mono,
            "worst_rate": verdict.worst_rate,
        },
        "checks": check_entries(checks),
        **extra,
    }
    if history is not None:
        payload["diagnostics"] = dict(history.diagnostics)
    write_report(out / report_name, payload)


def run_scenario(config: ScenarioConfig, output_dir: Path | None = None) -> Outcome:
    out = output_dir_for(config, output_dir)
    stages: dict[str, FlowHistory] = {}
    checks: list[AuditResult] = []
    data: dict[str, Any] = {}
    try:
        history = simulate(config, stages)
        checks.extend(audit_run(config, history))
        freq_checks, data = frequency_checks(config, history)
        checks.extend(freq_checks)
    except RUNTIME_ABORTS as exc:
        aborted_at = getattr(exc, "time", None)
        _flush(config, out, "aborted", checks, stages.get("history"), data,
               {"abort": {"error": type(exc).__name__, "message": str(exc), "time": aborted_at}})
        raise

    _flush(config, out, "completed", checks, history, data, {})
    if config.plots:
        report, eigen = data["report"], data["eigen"]
        write_plots(out / "plots.svg", report.times, report.Q, report.I, eigen, timestamps=config.plot_timestamps)
    return Outcome(status="completed", checks=checks, payload={"output": str(out)})


def audit_scenario(config: ScenarioConfig, output_dir: Path | None = None) -> Outcome:
    """Auditor checks only: identities at t = 0 plus those along the run."""
    out = output_dir_for(config, output_dir)
    stages: dict[str, FlowHistory] = {}
    checks: list[AuditResult] = []
    try:
        history = simulate(config, stages)
        metric, H, v = history.metric(0), history.H[0], history.v[0]
        checks.append(check_selfadjoint(metric, H, seed=config.seed, tolerance=config.tol_selfadjoint))
        checks.append(check_bochner(metric, H, v, tolerance=config.tol_identity))
        checks.append(check_reilly(metric, H, v, tolerance=config.tol_identity))
        checks.extend(audit_run(config, history))
    except RUNTIME_ABORTS as exc:
        _flush(config, out, "aborted", checks, stages.get("history"), {},
               {"abort": {"error": type(exc).__name__, "message": str(exc), "time": getattr(exc, "time", None)}},
               report_name="audit.json")
        raise
    _flush(config, out, "completed", checks, history, {}, {}, report_name="audit.json")
    return Outcome(status="completed", checks=checks, payload={"output": str(out)})


def converge_scenario(config: ScenarioConfig, output_dir: Path | None = None) -> Outcome:
    """Refinement studies; writes the slope table convergence.csv and convergence.json."""
    out = output_dir_for(config, output_dir)
    studies = (config.converge_study,) if config.converge_study else CONVERGENCE_SCENARIOS
    if any(s not in CONVERGENCE_SCENARIOS for s in studies):
        raise ConfigError(f"unknown study {config.converge_study!r} (expected one of "
                          f"{', '.join(CONVERGENCE_SCENARIOS)})", field="CONVERGE_STUDY")
    rows, checks, table = [], [], []
    for study in studies:
        print(f">>> Refinement study {study}")
        row = convergence_study(study, sizes=config.converge_sizes, steps=config.converge_steps,
                                fd_order=config.fd_order, seed=config.seed)
        rows.append(row)
        slope = float("nan") if row.slope is None else row.slope
        if row.slope is None:
            residual, tolerance = max(row.errors), config.tol_selfadjoint
        else:
            residual, tolerance = abs(row.slope - row.expected), _ORDER_TOLERANCE
        checks.append(AuditResult(name=study, residual=residual, tolerance=tolerance,
                                  passed=row.passed, slopes=(slope,) if row.slope is not None else (),
                                  details={"parameter": row.parameter, "values": row.values,
                                           "errors": row.errors, "expected_order": row.expected}))
        for value, error in zip(row.values, row.errors):
            table.append((study, row.parameter, value, error, slope,
                          float("nan") if row.expected is None else row.expected, row.passed))

    write_convergence_table(out / "convergence.csv", table)
    payload = {"scenario": config.name, "status": "completed", "passed": all(c.passed for c in checks),
               "config": config.echo(), "checks": check_entries(checks)}
    write_report(out / "convergence.json", payload)
    return Outcome(status="completed", checks=checks, payload={"output": str(out)})


def eigen_scenario(config: ScenarioConfig, output_dir: Path | None = None) -> Outcome:
    """First nonzero eigenpair of -L_f for the initial metric and the terminal density."""
    out = output_dir_for(config, output_dir)
    grid, g0, H, _ = initial_fields(config)
    print(f">>> Inverse iteration on N={config.n} ({config.metric_preset}, H {config.terminal_preset})")
    result = drift_eigenpair(g0, H, EigenConfig(seed=config.seed))
    checks = [check("eigen-residual", result.residual / result.eigenvalue, EigenConfig().tolerance,
                    result.residual <= EigenConfig().tolerance * result.eigenvalue,
                    iterations=result.iterations, near_degenerate=result.near_degenerate)]

    flat = config.metric_preset == "flat" and config.terminal_preset == "uniform"
    expected = discrete_symbol(grid, 1) if flat else None
    if expected is not None:
        error = abs(result.eigenvalue - expected)
        checks.append(check("discrete-symbol", error, 1e-10, error <= 1e-10, expected=expected))
    summary = {
        "eigenvalue": result.eigenvalue,
        "rayleigh_flux": rayleigh_quotient(result.u, g0, H),
        "rayleigh_gradient": gradient_rayleigh(result.u, g0, H),
        "nondivergence_residual": nondivergence_residual(result, g0, H),
        "rayleigh_history": list(result.rayleigh_history),
    }
    print(f">>> lambda = {result.eigenvalue:.12g}" + ("" if expected is None else f" (symbol {expected:.12g})"))
    payload = {"scenario": config.name, "status": "completed", "passed": all(c.passed for c in checks),
               "config": config.echo(), "eigen": summary, "checks": check_entries(checks)}
    write_report(out / "eigen.json", payload)
    return Outcome(status="completed", checks=checks, payload={"output": str(out), **summary})
