"""Parabolic frequency Q(t) of a heat solution along the flow, and the
monotonicity, rigidity, eigenvalue and backward-uniqueness checks built on it.

    I(t) = int v^2 dV
    E(t) = h(t) int |grad v|^2 dV
    Q(t) = E / I * exp(-int_t0^t (2 p_bar + (h' + k) / h) ds)

E is evaluated through the half-node flux form, which equals
-h int v L_f v dV exactly; the node-centred gradient integral is kept as
a cross-check.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from src.config import M, VANISHING_THRESHOLD
from src.flow import FlowHistory
from src.guardrails import require_constant_sign
from src.spectral import EigenConfig, EigenResult, drift_eigenpair
from src.tensor_grid import (
    MetricField,
    StiffnessOperator,
    bakry_emery,
    dirichlet_form,
    grad_norm_sq,
    integrate,
)

logger = logging.getLogger(__name__)

WEIGHT_PRESETS = {"constant": 1, "linear": 2, "exponential": 2}

_WINDOW_SLACK = 1e-12

# Round-off allowance for the relative Cauchy-Schwarz gap
CAUCHY_SCHWARZ_ROUNDOFF = 1e4 * float(np.finfo(float).eps)


def _profile(preset: str, params: tuple[float, ...], t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t, dtype=float)
    if preset == "constant":
        (c,) = params
        return np.full_like(t, c), np.zeros_like(t)
    if preset == "linear":
        c0, c1 = params
        return c0 + c1 * t, np.full_like(t, c1)
    if preset == "exponential":
        c, rate = params
        value = c * np.exp(rate * t)
        return value, rate * value
    raise ValueError(f"unknown time-weight preset {preset!r}")


@dataclass(frozen=True)
class TimeWeight:
    """h(t), k(t) and the observation window [t0, t1] (t1 = None means the final time)."""

    h_preset: str = "constant"
    h_params: tuple[float, ...] = (1.0,)
    k_preset: str = "auto"
    k_params: tuple[float, ...] = ()
    t0: float = 0.0
    t1: float | None = None

    def __post_init__(self):
        for name, preset, params in (("h", self.h_preset, self.h_params), ("k", self.k_preset, self.k_params)):
            if name == "k" and preset == "auto":
                continue
            if preset not in WEIGHT_PRESETS:
                raise ValueError(f"unknown {name} preset {preset!r}")
            if len(params) != WEIGHT_PRESETS[preset]:
                raise ValueError(f"{name} preset {preset!r} takes {WEIGHT_PRESETS[preset]} parameter(s)")
        if self.t1 is not None and not self.t0 < self.t1:
            raise ValueError(f"window start t0={self.t0} must precede t1={self.t1}")

    @property
    def auto_k(self) -> bool:
        return self.k_preset == "auto"

    def h(self, t: np.ndarray) -> np.ndarray:
        return _profile(self.h_preset, self.h_params, t)[0]

    def h_prime(self, t: np.ndarray) -> np.ndarray:
        return _profile(self.h_preset, self.h_params, t)[1]

    def k(self, t: np.ndarray) -> np.ndarray:
        if self.auto_k:
            raise ValueError("k is chosen from the curvature bound; use k_auto")
        return _profile(self.k_preset, self.k_params, t)[0]

    def window(self, times: np.ndarray) -> np.ndarray:
        """Indices of the step times enclosed by [t0, t1]."""
        end = times[-1] if self.t1 is None else self.t1
        if self.t0 < times[0] - _WINDOW_SLACK or end > times[-1] + _WINDOW_SLACK:
            raise ValueError(f"window [{self.t0}, {end}] is not inside the run [{times[0]}, {times[-1]}]")
        inside = np.flatnonzero((times >= self.t0 - _WINDOW_SLACK) & (times <= end + _WINDOW_SLACK))
        if inside.size < 2:
            raise ValueError(f"window [{self.t0}, {end}] encloses fewer than two steps")
        return inside


@dataclass(frozen=True)
class WindowWeights:
    """h, h', k and the correction exponent sampled on the window steps."""

    indices: np.ndarray
    times: np.ndarray
    sign: int
    h: np.ndarray
    h_prime: np.ndarray
    k: np.ndarray
    k_auto: np.ndarray
    mu_max: np.ndarray
    hypothesis_met: bool
    p_bar: np.ndarray
    exponent: np.ndarray


@dataclass(frozen=True)
class FrequencyReport:
    weights: WindowWeights
    I: np.ndarray
    E: np.ndarray
    E_gradient: np.ndarray
    Q: np.ndarray
    dQdt: np.ndarray
    vanished: np.ndarray
    cauchy_schwarz_gap: np.ndarray  # I int (L_f v)^2 dV - (int |grad v|^2 dV)^2
    cauchy_schwarz_scale: np.ndarray  # I int (L_f v)^2 dV
    eps_mono: float

    @property
    def times(self) -> np.ndarray:
        return self.weights.times


@dataclass(frozen=True)
class MonotonicityVerdict:
    verdict: str
    asserted: bool
    passed: bool
    eps_mono: float
    worst_rate: float
    rigidity_times: np.ndarray
    rigidity_c: np.ndarray
    rigidity_residual: np.ndarray


@dataclass(frozen=True)
class IDerivativeCheck:
    residual: np.ndarray
    finite_difference_residual: np.ndarray

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residual)) if self.residual.size else 0.0


@dataclass(frozen=True)
class BackwardUniqueness:
    a: float
    b: float
    residual: float
    vacuous: bool
    passed: bool


@dataclass(frozen=True)
class EigenMonotonicity:
    times: np.ndarray
    eigenvalues: np.ndarray
    corrected: np.ndarray  # h(t) lambda(t) exp(-exponent)
    reference: float  # h(t0) lambda(t0)
    margin: float
    passed: bool
    raw_monotone: bool
    # Only with a frequency report for heat data started from the eigenfunction
    start_residual: float | None = None  # |Q(t0) - h(t0) lambda(t0)| / |h(t0) lambda(t0)|
    chain_margin: float | None = None  # min sign(h) (Q - corrected) over the samples


@dataclass(frozen=True)
class ForcedGrowthChecks:
    skipped: str | None
    growth: np.ndarray  # (log I)' + 3 p_bar + (p_bar + 2) E/(h I)
    frequency_growth: np.ndarray  # p_bar^2 (Q + h(t0)) - Q'
    frequency_growth_sharp: np.ndarray  # p_bar^2 (Q + h exp(-exponent)) - Q'
    log_frequency_growth: np.ndarray  # p_bar^2 - [log(Q + h(t0))]'
    lower_bound: float  # log(I(t1)/I(t0)) minus the displayed exponent
    gronwall: np.ndarray  # (Q(t0) + h(t0)) exp(int p_bar^2) - h(t0) - Q
    verdict: str
    passed: bool


# --- building blocks --------------------------------------------------------

def compute_I(v: np.ndarray, density: np.ndarray, metric: MetricField) -> float:
    """I = int v^2 dV for a dV density H sqrt(det g)."""
    return integrate(v * v, density, metric.grid)


def compute_E(v: np.ndarray, metric: MetricField, H: np.ndarray, h: float) -> float:
    """E = h int |grad v|^2 dV in flux form."""
    return h * dirichlet_form(v, v, metric, H)


def compute_E_gradient(v: np.ndarray, metric: MetricField, H: np.ndarray, h: float) -> float:
    return h * integrate(grad_norm_sq(v, metric), H * metric.sqrt_det, metric.grid)


def correction_exponent(times: np.ndarray, p_bar: np.ndarray, h: np.ndarray, h_prime: np.ndarray,
                        k: np.ndarray, pressure_coefficient: float = 2.0) -> np.ndarray:
    """int_t0^t (c p_bar + (h' + k)/h) ds by the trapezoid rule, c = 2 (6 for the Gamma variant)."""
    require_constant_sign("h", h)
    integrand = pressure_coefficient * p_bar + (h_prime + k) / h
    return cumulative_trapezoid(integrand, times, initial=0.0)


def correction_factor(times: np.ndarray, p_bar: np.ndarray, h: np.ndarray, h_prime: np.ndarray,
                      k: np.ndarray, pressure_coefficient: float = 2.0) -> np.ndarray:
    return np.exp(-correction_exponent(times, p_bar, h, h_prime, k, pressure_coefficient))


def mu_max(metric: MetricField, H: np.ndarray, ric_f: np.ndarray | None = None) -> float:
    """Largest generalized eigenvalue of (Ric_f, g) over all nodes."""
    if ric_f is None:
        ric_f = bakry_emery(metric, H)
    g = np.moveaxis(metric.g, (0, 1), (-2, -1))
    tensor = np.moveaxis(ric_f, (0, 1), (-2, -1))
    lower = np.linalg.inv(np.linalg.cholesky(g))
    reduced = lower @ tensor @ np.swapaxes(lower, -1, -2)
    return float(np.max(np.linalg.eigvalsh(reduced)))


def k_auto(h: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """k = 2 h (m + mu_max): saturates Ric_f <= (k/(2h) - m) g for either sign of h."""
    return 2.0 * h * (M + mu)


def window_weights(history: FlowHistory, weights: TimeWeight, pressure_coefficient: float = 2.0) -> WindowWeights:
    if history.H is None:
        raise ValueError("history has no conjugate density; run solve_conjugate_heat first")
    indices = weights.window(history.times)
    times = history.times[indices]
    h = weights.h(times)
    sign = require_constant_sign("h", h)
    h_prime = weights.h_prime(times)
    mu = np.array([mu_max(history.metric(i), history.H[i]) for i in indices])
    saturating = k_auto(h, mu)
    if weights.auto_k:
        k = saturating
        hypothesis_met = True
    else:
        k = weights.k(times)
        slack = (k - saturating) / h
        hypothesis_met = bool(np.all(slack >= -1e-10 * np.maximum(1.0, np.abs(saturating))))
        if not hypothesis_met:
            logger.warning("Supplied k falls below the curvature bound by up to %.3e", float(-np.min(slack)))
    p_bar = history.p_bars[indices]
    exponent = correction_exponent(times, p_bar, h, h_prime, k, pressure_coefficient)
    return WindowWeights(indices=indices, times=times, sign=sign, h=h, h_prime=h_prime, k=k,
                         k_auto=saturating, mu_max=mu, hypothesis_met=hypothesis_met,
                         p_bar=p_bar, exponent=exponent)


def _semidiscrete_I_rate(history: FlowHistory, i: int, metric: MetricField) -> float:
    """I' = int (2 v v_t) dV + int v^2 d_t(dV) from the right-hand sides at step i."""
    v = history.v[i]
    density = history.H[i] * metric.sqrt_det
    v_dot = history.heat_rate(i, metric)
    rho_dot = history.density_rate(i, metric)
    return float(np.sum(2.0 * v * v_dot * density + v * v * rho_dot)) * metric.grid.cell_volume


# --- operations -------------------------------------------------------------

def compute_Q(history: FlowHistory, weights: TimeWeight, eps_rel: float = 1e-4,
              pressure_coefficient: float = 2.0) -> FrequencyReport:
    if history.v is None:
        raise ValueError("history has no heat solution; run solve_heat or solve_forced_heat first")
    window = window_weights(history, weights, pressure_coefficient)
    I, E, E_grad, gap, scale = [], [], [], [], []
    for i, h in zip(window.indices, window.h):
        metric = history.metric(i)
        v, H = history.v[i], history.H[i]
        density = H * metric.sqrt_det
        stiffness = StiffnessOperator.for_metric(metric, H)
        kv = stiffness.apply(v)
        energy = float(np.sum(v * kv)) * metric.grid.cell_volume
        mass = compute_I(v, density, metric)
        drift = -kv / density
        I.append(mass)
        E.append(h * energy)
        E_grad.append(compute_E_gradient(v, metric, H, h))
        scale.append(mass * integrate(drift * drift, density, metric.grid))
        gap.append(scale[-1] - energy * energy)
        logger.debug("t=%.6g: I=%.12g E=%.12g (gradient form %.12g)", history.states[i].t, mass, h * energy,
                     E_grad[-1])

    I, E, E_grad = np.array(I), np.array(E), np.array(E_grad)
    vanished = I < VANISHING_THRESHOLD
    with np.errstate(divide="ignore", invalid="ignore"):
        Q = np.where(vanished, np.nan, E / I * np.exp(-window.exponent))
    dQdt = np.gradient(Q, window.times)
    finite = Q[np.isfinite(Q)]
    eps_mono = eps_rel * float(np.max(np.abs(finite))) if finite.size else 0.0
    if np.any(vanished):
        logger.warning("I(t) vanished at %d sample(s); Q is undefined there", int(np.count_nonzero(vanished)))
    return FrequencyReport(weights=window, I=I, E=E, E_gradient=E_grad, Q=Q, dQdt=dQdt, vanished=vanished,
                           cauchy_schwarz_gap=np.array(gap), cauchy_schwarz_scale=np.array(scale),
                           eps_mono=eps_mono)


def cauchy_schwarz_margin(report: FrequencyReport) -> float:
    """Smallest gap relative to I int (L_f v)^2 dV; nonnegative up to round-off.

    With the flux-form E the gap is a discrete Cauchy-Schwarz inequality for
    the symmetric stiffness operator.
    """
    scale = report.cauchy_schwarz_scale
    defined = scale > 0.0
    if not np.any(defined):
        return 0.0
    return float(np.min(report.cauchy_schwarz_gap[defined] / scale[defined]))


def monotonicity_report(report: FrequencyReport, history: FlowHistory) -> MonotonicityVerdict:
    window = report.weights
    rates = report.dQdt[1:-1] if report.dQdt.size >= 3 else report.dQdt
    rates = rates[np.isfinite(rates)]
    eps = report.eps_mono
    worst = float(np.max(window.sign * rates)) if rates.size else 0.0

    if not window.hypothesis_met:
        verdict = "hypothesis-unmet"
    elif rates.size == 0:
        verdict = "undefined"
    elif np.all(np.abs(rates) <= eps):
        verdict = "constant"
    elif window.sign > 0:
        if np.all(rates < -eps):
            verdict = "strictly decreasing"
        elif np.all(rates <= eps):
            verdict = "nonincreasing"
        else:
            verdict = "violated"
    else:
        if np.all(rates > eps):
            verdict = "strictly increasing"
        elif np.all(rates >= -eps):
            verdict = "nondecreasing"
        else:
            verdict = "violated"
    asserted = window.hypothesis_met and rates.size > 0

    # Rigidity: where Q' vanishes, v should solve -L_f v = c(t) v
    flat = np.flatnonzero(np.isfinite(report.dQdt) & (np.abs(report.dQdt) <= eps))
    c_values, residuals = [], []
    for j in flat:
        i = window.indices[j]
        c = report.Q[j] / window.h[j] * np.exp(window.exponent[j])
        metric = history.metric(i)
        v, H = history.v[i], history.H[i]
        density = H * metric.sqrt_det
        defect = StiffnessOperator.for_metric(metric, H).apply(v) / density - c * v
        norm = integrate(v * v, density, metric.grid)
        c_values.append(c)
        residuals.append(np.sqrt(integrate(defect * defect, density, metric.grid) / norm))
    if verdict == "constant" and residuals:
        logger.info("Rigidity: Q constant, max eigen-residual %.3e", max(residuals))

    return MonotonicityVerdict(verdict=verdict, asserted=asserted, passed=verdict != "violated", eps_mono=eps,
                               worst_rate=worst, rigidity_times=window.times[flat],
                               rigidity_c=np.array(c_values), rigidity_residual=np.array(residuals))


def check_I_derivative(history: FlowHistory, report: FrequencyReport) -> IDerivativeCheck:
    """Residual of I' = 2 p_bar I - 2 E / h along an unforced heat run."""
    forcing = history.forcing
    if forcing is not None and (forcing.a, forcing.b) != (1.0, 0.0):
        raise ValueError("I' identity holds for the unforced heat equation only")
    window = report.weights
    expected = 2.0 * window.p_bar * report.I - 2.0 * report.E / window.h
    semidiscrete = np.array([_semidiscrete_I_rate(history, i, history.metric(i)) for i in window.indices])
    residual = np.abs(semidiscrete - expected) / np.maximum(np.abs(semidiscrete), 1.0)
    finite_difference = np.gradient(report.I, window.times)
    fd_residual = np.abs(finite_difference - expected) / np.maximum(np.abs(finite_difference), 1.0)
    logger.debug("I' residual max %.3e (time-difference variant %.3e)",
                 float(np.max(residual)), float(np.max(fd_residual)))
    return IDerivativeCheck(residual=residual, finite_difference_residual=fd_residual)


def backward_uniqueness_bound(report: FrequencyReport, a: float | None = None, b: float | None = None,
                              tolerance: float = 1e-6) -> BackwardUniqueness:
    """log(I(b)/I(a)) >= 2 int p_bar - 2 (E/I)(a) int_a^b (1/h) exp(int_a^t (2 p_bar + (h'+k)/h)) dt for h < 0."""
    window = report.weights
    if window.sign > 0:
        raise ValueError("the backward-uniqueness bound needs h < 0")
    times = window.times
    ia = 0 if a is None else int(np.argmin(np.abs(times - a)))
    ib = len(times) - 1 if b is None else int(np.argmin(np.abs(times - b)))
    if not ia < ib:
        raise ValueError("need a < b inside the window")
    if report.vanished[ia]:
        return BackwardUniqueness(a=times[ia], b=times[ib], residual=float("nan"), vacuous=True, passed=True)

    segment = slice(ia, ib + 1)
    ts = times[segment]
    integrand = 2.0 * window.p_bar[segment] + (window.h_prime[segment] + window.k[segment]) / window.h[segment]
    inner = cumulative_trapezoid(integrand, ts, initial=0.0)
    weighted = trapezoid(np.exp(inner) / window.h[segment], ts)
    rhs = 2.0 * trapezoid(window.p_bar[segment], ts) - 2.0 * report.E[ia] / report.I[ia] * weighted
    if report.vanished[ib]:
        # A finite lower bound forbids I(b) = 0 when I(a) > 0
        return BackwardUniqueness(a=times[ia], b=times[ib], residual=float("-inf"), vacuous=False, passed=False)
    residual = float(np.log(report.I[ib] / report.I[ia]) - rhs)
    return BackwardUniqueness(a=times[ia], b=times[ib], residual=residual, vacuous=False,
                              passed=residual >= -tolerance)


def eigenfunction_start(history: FlowHistory, weights: TimeWeight,
                        cfg: EigenConfig | None = None) -> tuple[FlowHistory, EigenResult]:
    """The run from the first window step on, with the eigenpair of -L_f there as heat data.

    The heat pass then starts at t0 from v(t0) = u, so Q(t0) = h(t0) lambda(t0).
    """
    if history.H is None:
        raise ValueError("history has no conjugate density; run solve_conjugate_heat first")
    start = int(weights.window(history.times)[0])
    pair = drift_eigenpair(history.metric(start), history.H[start], cfg)
    logger.info("Heat data: eigenfunction at t=%.6g (lambda=%.12g)", history.times[start], pair.eigenvalue)
    return history.since(start), pair


def eigen_monotonicity_check(history: FlowHistory, weights: TimeWeight, cfg: EigenConfig | None = None,
                             stride: int = 1, tolerance: float = 1e-4,
                             report: FrequencyReport | None = None) -> EigenMonotonicity:
    """h(t) lambda(t) exp(-exponent) against h(t0) lambda(t0), lambda recomputed per sample.

    With `report` (heat data started from the eigenfunction at t0) the chain
    h(t0) lambda(t0) = Q(t0) and sign(h) Q(t) >= sign(h) h(t) lambda(t) exp(-exponent)
    is checked as well, since E/(h I) is the Rayleigh quotient of v(t).
    """
    window = report.weights if report is not None else window_weights(history, weights)
    picks = list(range(0, len(window.indices), max(stride, 1)))
    if picks[-1] != len(window.indices) - 1:
        picks.append(len(window.indices) - 1)
    eigenvalues = np.array([
        drift_eigenpair(history.metric(window.indices[j]), history.H[window.indices[j]], cfg).eigenvalue
        for j in picks
    ])
    h = window.h[picks]
    corrected = h * eigenvalues * np.exp(-window.exponent[picks])
    reference = float(corrected[0])
    slack = tolerance * max(1.0, abs(reference))
    if window.sign > 0:
        margin = float(np.min(reference - corrected))
    else:
        margin = float(np.min(corrected - reference))
    passed = margin >= -slack
    raw = h * eigenvalues
    raw_monotone = bool(np.all(np.diff(raw) <= 0.0))
    logger.info("h lambda monotone without correction: %s (informational)", raw_monotone)

    start_residual = chain_margin = None
    if report is not None:
        Q = report.Q[picks]
        start_residual = float(abs(Q[0] - reference) / max(abs(reference), VANISHING_THRESHOLD))
        chain_margin = float(np.min(window.sign * (Q - corrected)))
        passed = passed and start_residual <= tolerance and chain_margin >= -slack
        logger.info("Q(t0) against h(t0) lambda(t0): %.3e; Q above the corrected eigenvalue by %.3e",
                    start_residual, chain_margin)
    return EigenMonotonicity(times=window.times[picks], eigenvalues=eigenvalues, corrected=corrected,
                             reference=reference, margin=margin, passed=passed, raw_monotone=raw_monotone,
                             start_residual=start_residual, chain_margin=chain_margin)


def forced_growth_checks(history: FlowHistory, report: FrequencyReport, tolerance: float = 1e-4,
                         certificate_tolerance: float = 1e-8) -> ForcedGrowthChecks:
    """Growth bounds for solutions of |(d_t - Delta) v| <= p_bar (|v| + |grad v|), h > 0."""
    window = report.weights
    empty = np.array([])
    if window.sign < 0:
        raise ValueError("the forced-heat growth bounds need h > 0")
    if history.certificate is None or max(history.certificate) > certificate_tolerance:
        worst = float("nan") if history.certificate is None else max(history.certificate)
        return ForcedGrowthChecks(skipped=f"forcing certificate failed (max {worst:.3e})", growth=empty,
                                  frequency_growth=empty, frequency_growth_sharp=empty,
                                  log_frequency_growth=empty, lower_bound=float("nan"), gronwall=empty,
                                  verdict="skipped", passed=False)

    times, pbar, h = window.times, window.p_bar, window.h
    h0 = float(h[0])
    I, E, Q, dQ = report.I, report.E, report.Q, report.dQdt

    if report.vanished[-1]:
        forced_zero = bool(report.vanished[0])
        return ForcedGrowthChecks(skipped=None, growth=empty, frequency_growth=empty, frequency_growth_sharp=empty,
                                  log_frequency_growth=empty, lower_bound=float("nan"), gronwall=empty,
                                  verdict="forces I(t0)=0", passed=forced_zero)

    rates = np.array([_semidiscrete_I_rate(history, i, history.metric(i)) for i in window.indices])
    growth = rates / I + 3.0 * pbar + (pbar + 2.0) * E / (h * I)

    interior = slice(1, -1) if len(times) >= 3 else slice(None)
    frequency_growth = (pbar ** 2 * (Q + h0) - dQ)[interior]
    sharp = (pbar ** 2 * (Q + h * np.exp(-window.exponent)) - dQ)[interior]
    log_growth = (pbar ** 2 - dQ / (Q + h0))[interior]

    squared = cumulative_trapezoid(pbar ** 2, times, initial=0.0)
    gronwall = (Q[0] + h0) * np.exp(squared) - h0 - Q

    sup_p = float(np.max(pbar))
    span = times[-1] - times[0]
    q_bound = (Q[0] + h0) * np.exp(squared[-1])
    spread = np.exp(window.exponent[-1]) * trapezoid(1.0 / h, times)
    displayed = -3.0 * span * sup_p - (2.0 + sup_p) * q_bound * spread
    lower_bound = float(np.log(I[-1] / I[0]) - displayed)

    worst = min(float(np.min(growth)), float(np.min(frequency_growth)), float(np.min(log_growth)),
                lower_bound, float(np.min(gronwall)))
    passed = worst >= -tolerance
    return ForcedGrowthChecks(skipped=None, growth=growth, frequency_growth=frequency_growth,
                              frequency_growth_sharp=sharp, log_frequency_growth=log_growth,
                              lower_bound=lower_bound, gronwall=gronwall,
                              verdict="holds" if passed else "violated", passed=passed)
