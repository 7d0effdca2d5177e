"""Matrix-free conjugate-gradient solves for the conformal pressure and
positive Helmholtz problems (-Delta_g + c) u = F.

The system is solved in the symmetrized unknown z = W^(1/2) u with
W = sqrt(det g), for which the operator W^(-1/2) (K + c W) W^(-1/2) is
symmetric positive definite in the Euclidean inner product and the
Euclidean residual equals the d mu residual.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from src.config import DIM, M, PRESSURE_FLOOR
from src.tensor_grid import MetricField, StiffnessOperator, ricci, tensor_norm_sq

logger = logging.getLogger(__name__)

_MAX_RESTARTS = 3


class SolverError(RuntimeError):
    """Conjugate gradients did not reach the requested residual."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class PressureViolation(RuntimeError):
    """A pressure solve came back below the maximum-principle floor."""

    def __init__(self, message: str, min_pressure: float):
        super().__init__(message)
        self.min_pressure = min_pressure


@dataclass(frozen=True)
class EllipticConfig:
    rel_tolerance: float = 1e-10
    max_iterations: int | None = None  # None means 10 N^3
    preconditioner: str = "diagonal"

    def __post_init__(self):
        if not self.rel_tolerance > 0.0:
            raise ValueError(f"rel_tolerance must be positive, got {self.rel_tolerance}")
        if self.preconditioner not in ("none", "diagonal"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")

    def iteration_limit(self, nodes: int) -> int:
        return self.max_iterations if self.max_iterations is not None else 10 * nodes


def conjugate_gradient(apply: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray, cfg: EllipticConfig,
                       x0: np.ndarray | None = None,
                       precondition: Callable[[np.ndarray], np.ndarray] | None = None,
                       label: str = "solve") -> np.ndarray:
    """CG on a flat SPD operator with a verified true-residual exit.

    scipy's recurrence residual can drift from the true residual near
    round-off, so the result is checked and CG restarted from it if needed.
    """
    size = rhs.size
    operator = LinearOperator((size, size), matvec=apply, dtype=float)
    preconditioner = None
    if precondition is not None and cfg.preconditioner == "diagonal":
        preconditioner = LinearOperator((size, size), matvec=precondition, dtype=float)

    limit = cfg.iteration_limit(size)
    target = cfg.rel_tolerance * float(np.linalg.norm(rhs))
    x = np.zeros(size) if x0 is None else np.array(x0, dtype=float)
    used = 0
    residual = float(np.linalg.norm(rhs - apply(x)))
    for attempt in range(_MAX_RESTARTS + 1):
        if residual <= target:
            break
        iterations = [0]

        def _count(_xk):
            iterations[0] += 1

        x, info = cg(operator, rhs, x0=x, rtol=cfg.rel_tolerance, atol=0.0,
                     maxiter=max(limit - used, 1), M=preconditioner, callback=_count)
        used += iterations[0]
        residual = float(np.linalg.norm(rhs - apply(x)))
        logger.debug("%s: attempt %d, %d iterations, residual %.3e (target %.3e)",
                     label, attempt, iterations[0], residual, target)
        if used >= limit:
            break
    if residual > target:
        raise SolverError(
            f"{label} did not converge: residual {residual:.3e} > {target:.3e} after {used} iterations",
            residual=residual / max(float(np.linalg.norm(rhs)), np.finfo(float).tiny),
            iterations=used,
        )
    return x


def solve_helmholtz(metric: MetricField, c: float, F: np.ndarray, cfg: EllipticConfig | None = None,
                    x0: np.ndarray | None = None) -> np.ndarray:
    """Solve (-Delta_g + c) u = F for c > 0."""
    cfg = cfg or EllipticConfig()
    if not c > 0.0:
        raise ValueError(f"Helmholtz shift must be positive (got {c}); -Delta + c is not definite")
    grid = metric.grid
    if not np.any(F):
        return np.zeros(grid.shape)

    stiffness = StiffnessOperator.for_metric(metric)
    weight = metric.sqrt_det
    root = np.sqrt(weight)

    def apply(z: np.ndarray) -> np.ndarray:
        u = z.reshape(grid.shape) / root
        return (stiffness.apply(u) / root + c * root * u).ravel()

    inverse_diagonal = (1.0 / (stiffness.diagonal() / weight + c)).ravel()
    rhs = (root * F).ravel()
    start = None if x0 is None else (root * x0).ravel()
    z = conjugate_gradient(apply, rhs, cfg, x0=start, precondition=lambda r: inverse_diagonal * r,
                           label="helmholtz")
    return z.reshape(grid.shape) / root


def _check_floor(p: np.ndarray) -> np.ndarray:
    smallest = float(np.min(p))
    if smallest < PRESSURE_FLOOR:
        raise PressureViolation(
            f"pressure minimum {smallest:.3e} below {PRESSURE_FLOOR:g}: discretization violates the maximum principle",
            min_pressure=smallest,
        )
    return p


def solve_pressure(metric: MetricField, cfg: EllipticConfig | None = None, ric: np.ndarray | None = None,
                   x0: np.ndarray | None = None) -> np.ndarray:
    """(-Delta_g + (m+1)) p = (1/m) |Ric + m g|^2.

    `ric` overrides the computed Ricci tensor (used for curvature injections).
    """
    if ric is None:
        ric = ricci(metric)
    rhs = tensor_norm_sq(ric + M * metric.g, metric) / M
    p = solve_helmholtz(metric, M + 1, rhs, cfg, x0=x0)
    return _check_floor(p)


def solve_pressure_general(metric: MetricField, r0: float, cfg: EllipticConfig | None = None,
                           ric: np.ndarray | None = None, x0: np.ndarray | None = None) -> np.ndarray:
    """(n-1) Delta p + R0 p = -|Ric - (R0/n) g|^2 for a negative constant R0."""
    if r0 >= 0.0:
        raise ValueError(f"R0 must be negative (got {r0}); (n-1) Delta + R0 is not invertible otherwise")
    if ric is None:
        ric = ricci(metric)
    rhs = tensor_norm_sq(ric - (r0 / DIM) * metric.g, metric) / (DIM - 1)
    p = solve_helmholtz(metric, abs(r0) / (DIM - 1), rhs, cfg, x0=x0)
    return _check_floor(p)


def p_bar(p: np.ndarray) -> float:
    return float(np.max(p))
