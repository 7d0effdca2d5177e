"""First nonzero eigenpair of the drifting Laplacian in the dV inner product."""

import logging
from dataclasses import dataclass, field

import numpy as np

from src.elliptic import EllipticConfig, SolverError, conjugate_gradient
from src.guardrails import require_positive
from src.tensor_grid import (
    MetricField,
    StiffnessOperator,
    dirichlet_form,
    drifting_laplacian_nondivergence,
    grad_norm_sq,
    integrate,
)

logger = logging.getLogger(__name__)

NEAR_DEGENERATE_GAP = 1e-8


@dataclass(frozen=True)
class EigenConfig:
    tolerance: float = 1e-10  # residual relative to the eigenvalue
    max_iterations: int = 500
    inner: EllipticConfig = field(default_factory=lambda: EllipticConfig(rel_tolerance=1e-11))
    seed: int = 0


@dataclass(frozen=True)
class EigenResult:
    eigenvalue: float
    u: np.ndarray  # int u dV = 0, int u^2 dV = 1
    residual: float  # || -L_f u - eigenvalue u ||_dV
    iterations: int
    rayleigh_history: tuple[float, ...]
    near_degenerate: bool = False


def drift_eigenpair(metric: MetricField, H: np.ndarray, cfg: EigenConfig | None = None) -> EigenResult:
    """Inverse power iteration for the smallest nonzero eigenvalue of -L_f.

    Works in z = W^(1/2) u with W = H sqrt(det g), where -L_f becomes the
    symmetric matrix B = W^(-1/2) K W^(-1/2) with kernel spanned by W^(1/2).
    That direction is projected out before and after every solve.
    """
    cfg = cfg or EigenConfig()
    require_positive("H", H)
    grid = metric.grid
    stiffness = StiffnessOperator.for_metric(metric, H)
    weight = H * metric.sqrt_det
    root = np.sqrt(weight)
    kernel = root.ravel() / float(np.linalg.norm(root))

    def project(x: np.ndarray) -> np.ndarray:
        return x - kernel * float(kernel @ x)

    def apply(z: np.ndarray) -> np.ndarray:
        return project((stiffness.apply(project(z).reshape(grid.shape) / root) / root).ravel())

    inverse_diagonal = (weight / stiffness.diagonal()).ravel()

    def precondition(r: np.ndarray) -> np.ndarray:
        return project(inverse_diagonal * project(r))

    rng = np.random.default_rng(cfg.seed)
    z = project(rng.standard_normal(grid.n ** 3))
    z /= float(np.linalg.norm(z))

    history: list[float] = []
    residuals: list[float] = []
    eigenvalue = float("inf")
    residual = float("inf")
    for iteration in range(1, cfg.max_iterations + 1):
        y = conjugate_gradient(apply, z, cfg.inner, precondition=precondition, label="inverse iteration")
        z = project(y)
        z /= float(np.linalg.norm(z))
        bz = apply(z)
        eigenvalue = float(z @ bz)
        residual = float(np.linalg.norm(bz - eigenvalue * z))
        history.append(eigenvalue)
        residuals.append(residual)
        logger.debug("inverse iteration %d: lambda=%.15g residual=%.3e", iteration, eigenvalue, residual)
        if residual <= cfg.tolerance * max(eigenvalue, np.finfo(float).tiny):
            break
    else:
        raise SolverError(
            f"eigen iteration did not converge in {cfg.max_iterations} iterations (residual {residual:.3e})",
            residual=residual,
            iterations=cfg.max_iterations,
        )

    near_degenerate = False
    if len(residuals) >= 3 and residuals[-2] > 0.0:
        ratio = residuals[-1] / residuals[-2]
        gap = eigenvalue * (1.0 / ratio - 1.0) if ratio > 0.0 else float("inf")
        near_degenerate = gap < NEAR_DEGENERATE_GAP
        if near_degenerate:
            logger.warning("Near-degenerate eigenpair: estimated gap %.3e at lambda=%.6g", gap, eigenvalue)

    u = z.reshape(grid.shape) / (root * np.sqrt(grid.cell_volume))
    logger.info("Eigenpair lambda=%.12g after %d iterations (residual %.3e)", eigenvalue, iteration, residual)
    return EigenResult(
        eigenvalue=eigenvalue,
        u=u,
        residual=residual,
        iterations=iteration,
        rayleigh_history=tuple(history),
        near_degenerate=near_degenerate,
    )


def rayleigh_quotient(u: np.ndarray, metric: MetricField, H: np.ndarray) -> float:
    """int |grad u|^2 dV / int u^2 dV with the flux-form numerator."""
    return dirichlet_form(u, u, metric, H) / integrate(u * u, H * metric.sqrt_det, metric.grid)


def gradient_rayleigh(u: np.ndarray, metric: MetricField, H: np.ndarray) -> float:
    """Same quotient with the node-centred gradient; agrees under refinement."""
    density = H * metric.sqrt_det
    return integrate(grad_norm_sq(u, metric), density, metric.grid) / integrate(u * u, density, metric.grid)


def nondivergence_residual(result: EigenResult, metric: MetricField, H: np.ndarray) -> float:
    """|| -(Delta u - <grad f, grad u>) - lambda u ||_dV / lambda."""
    density = H * metric.sqrt_det
    defect = -drifting_laplacian_nondivergence(result.u, metric, H) - result.eigenvalue * result.u
    return float(np.sqrt(integrate(defect * defect, density, metric.grid))) / result.eigenvalue
