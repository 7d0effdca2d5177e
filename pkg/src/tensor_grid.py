"""Discrete Riemannian geometry on a periodic grid over the 3-torus [0, 2pi)^3.

Fields are numpy arrays whose last three axes are the grid axes; tensor
components lead (a symmetric 2-tensor is a (3, 3, N, N, N) array). Operators
are pure: inputs are never modified and every call returns fresh arrays.

Second-order operators are assembled from a symmetric stiffness form

    K_A u = sum_i D_i^T [mid_i(A^ii) D_i u] + sum_{i != j} C_i^T [A^ij C_j u]

where D_i is the staggered difference to half nodes, mid_i the matching
interpolation and C_i the centred difference. K_A is an exactly symmetric
matrix, so -K_A u / w is self-adjoint in the w-weighted inner product.
"""

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from src.config import DIM, EPS_PD, FD_ORDER, M
from src.guardrails import require_positive

logger = logging.getLogger(__name__)

# (offset_a, offset_b, coefficient): contributes c * (u[i+a] -/+ u[i+b])
_CENTERED = {
    2: ((1, -1, 0.5),),
    4: ((1, -1, 2.0 / 3.0), (2, -2, -1.0 / 12.0)),
}
_STAGGERED = {
    2: ((1, 0, 1.0),),
    4: ((1, 0, 27.0 / 24.0), (2, -1, -1.0 / 24.0)),
}
_MIDPOINT = {
    2: ((0, 1, 0.5),),
    4: ((0, 1, 9.0 / 16.0), (-1, 2, -1.0 / 16.0)),
}

# Packed storage order of the six independent components of a symmetric tensor
SYM_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))

METRIC_PRESETS = ("flat", "conformal", "anisotropic", "random-smooth")
SCALAR_PRESETS = ("uniform", "zero", "fourier", "mode", "bump", "random")


class MetricError(ValueError):
    """A metric sample is not symmetric positive definite."""

    def __init__(self, message: str, worst_eigenvalue: float | None = None):
        super().__init__(message)
        self.worst_eigenvalue = worst_eigenvalue


@dataclass(frozen=True)
class Grid:
    n: int
    fd_order: int = FD_ORDER

    def __post_init__(self):
        if self.n < 8:
            raise ValueError(f"nodes per axis must be at least 8, got {self.n}")
        if self.fd_order not in _CENTERED:
            raise ValueError(f"fd_order must be 2 or 4, got {self.fd_order}")

    @property
    def dim(self) -> int:
        return DIM

    @property
    def spacing(self) -> float:
        return 2.0 * np.pi / self.n

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def cell_volume(self) -> float:
        return self.spacing ** 3

    def coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        axis = self.spacing * np.arange(self.n)
        return tuple(np.meshgrid(axis, axis, axis, indexing="ij"))


# --- stencils ---------------------------------------------------------------

def _shift(u: np.ndarray, offset: int, axis: int) -> np.ndarray:
    """u[i + offset] along a grid axis, periodic."""
    return np.roll(u, -offset, axis=axis - DIM)


def _difference(u: np.ndarray, pairs, axis: int, spacing: float) -> np.ndarray:
    out = np.zeros_like(u, dtype=float)
    for a, b, c in pairs:
        out += c * (_shift(u, a, axis) - _shift(u, b, axis))
    return out / spacing


def _difference_transpose(y: np.ndarray, pairs, axis: int, spacing: float) -> np.ndarray:
    out = np.zeros_like(y, dtype=float)
    for a, b, c in pairs:
        out += c * (_shift(y, -a, axis) - _shift(y, -b, axis))
    return out / spacing


def _interpolate(u: np.ndarray, pairs, axis: int) -> np.ndarray:
    out = np.zeros_like(u, dtype=float)
    for a, b, c in pairs:
        out += c * (_shift(u, a, axis) + _shift(u, b, axis))
    return out


def partial(u: np.ndarray, axis: int, grid: Grid) -> np.ndarray:
    """Centred derivative along one grid axis (component axes broadcast)."""
    return _difference(u, _CENTERED[grid.fd_order], axis, grid.spacing)


def partials(u: np.ndarray, grid: Grid) -> np.ndarray:
    """Coordinate differential du, shape (3,) + u.shape."""
    return np.stack([partial(u, a, grid) for a in range(DIM)])


def staggered_difference(u: np.ndarray, axis: int, grid: Grid) -> np.ndarray:
    """Derivative at the half node i + 1/2."""
    return _difference(u, _STAGGERED[grid.fd_order], axis, grid.spacing)


def staggered_difference_transpose(y: np.ndarray, axis: int, grid: Grid) -> np.ndarray:
    return _difference_transpose(y, _STAGGERED[grid.fd_order], axis, grid.spacing)


def midpoint(u: np.ndarray, axis: int, grid: Grid) -> np.ndarray:
    """Interpolation of node values to the half node i + 1/2."""
    return _interpolate(u, _MIDPOINT[grid.fd_order], axis)


def discrete_symbol(grid: Grid, wavenumber: int) -> float:
    """Eigenvalue of the flat stiffness form on sin(k x) along one axis."""
    h = grid.spacing
    half = wavenumber * h / 2.0
    if grid.fd_order == 2:
        return (2.0 * np.sin(half) / h) ** 2
    return ((27.0 * np.sin(half) - np.sin(3.0 * half)) / (12.0 * h)) ** 2


# --- symmetric tensors ------------------------------------------------------

def pack_sym(tensor: np.ndarray) -> np.ndarray:
    return np.stack([tensor[i, j] for i, j in SYM_PAIRS])


def unpack_sym(packed: np.ndarray) -> np.ndarray:
    tensor = np.empty((DIM, DIM) + packed.shape[1:], dtype=float)
    for c, (i, j) in enumerate(SYM_PAIRS):
        tensor[i, j] = packed[c]
        tensor[j, i] = packed[c]
    return tensor


def _transpose(tensor: np.ndarray) -> np.ndarray:
    return np.swapaxes(tensor, 0, 1)


def identity_tensor(grid: Grid) -> np.ndarray:
    return np.broadcast_to(np.eye(DIM)[:, :, None, None, None], (DIM, DIM) + grid.shape).copy()


# --- metric -----------------------------------------------------------------

@dataclass(frozen=True)
class MetricField:
    """Pointwise SPD metric g_ij with its inverse and volume density."""

    grid: Grid
    g: np.ndarray
    inverse: np.ndarray
    sqrt_det: np.ndarray

    @classmethod
    def from_components(cls, g: np.ndarray, grid: Grid) -> "MetricField":
        g = np.asarray(g, dtype=float)
        expected = (DIM, DIM) + grid.shape
        if g.shape != expected:
            raise MetricError(f"metric has shape {g.shape}, expected {expected}")
        if not np.all(np.isfinite(g)):
            raise MetricError("metric contains non-finite components")

        scale = float(np.max(np.abs(g)))
        asymmetry = float(np.max(np.abs(g - _transpose(g))))
        if asymmetry > 1e-10 * scale:
            raise MetricError(f"metric is not symmetric (max |g_ij - g_ji| = {asymmetry:.3e})")
        g = 0.5 * (g + _transpose(g))

        stacked = np.moveaxis(g, (0, 1), (-2, -1))
        eigenvalues = np.linalg.eigvalsh(stacked)
        smallest = eigenvalues[..., 0]
        worst = float(np.min(smallest))
        if worst <= EPS_PD:
            node = np.unravel_index(int(np.argmin(smallest)), grid.shape)
            raise MetricError(
                f"metric is not positive definite: worst eigenvalue {worst:.6e} at node {node}",
                worst_eigenvalue=worst,
            )

        inverse_stacked = np.linalg.inv(stacked)
        defect = float(np.max(np.abs(stacked @ inverse_stacked - np.eye(DIM))))
        condition = float(np.max(eigenvalues[..., -1] / smallest))
        if defect > 1e-12 * max(1.0, condition):
            raise MetricError(f"metric inverse check failed (|g g^-1 - I| = {defect:.3e})")

        inverse = np.moveaxis(inverse_stacked, (-2, -1), (0, 1))
        inverse = 0.5 * (inverse + _transpose(inverse))
        sqrt_det = np.sqrt(np.linalg.det(stacked))
        return cls(grid=grid, g=g, inverse=np.ascontiguousarray(inverse), sqrt_det=sqrt_det)

    @classmethod
    def from_packed(cls, packed: np.ndarray, grid: Grid) -> "MetricField":
        return cls.from_components(unpack_sym(packed), grid)

    def packed(self) -> np.ndarray:
        return pack_sym(self.g)


def _trig_field(rng: np.random.Generator, grid: Grid, max_mode: int, terms: int) -> np.ndarray:
    """Smooth zero-mean trigonometric field scaled to max |value| = 1."""
    x = grid.coordinates()
    field = np.zeros(grid.shape)
    for _ in range(terms):
        k = np.zeros(DIM, dtype=int)
        while not np.any(k):
            k = rng.integers(-max_mode, max_mode + 1, size=DIM)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        field += rng.normal() * np.sin(k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + phase)
    peak = float(np.max(np.abs(field)))
    return field / peak if peak > 0.0 else field


def metric_from_preset(preset: str, params: Mapping, grid: Grid) -> MetricField:
    """Initial metric factory.

    flat            g = delta
    conformal       g = exp(2 amplitude sin(mode x^axis)) delta
    anisotropic     g_ii = exp(2 a_i sin(mode x^{axes_i})), off-diagonals zero
    random-smooth   g = delta + amplitude S, S a seeded symmetric trig field
                    with entries bounded by 1 (positive definite for amplitude < 1/3)
    """
    x = grid.coordinates()
    g = identity_tensor(grid)
    if preset == "flat":
        pass
    elif preset == "conformal":
        amplitude = float(params.get("amplitude", 0.1))
        mode = int(params.get("mode", 1))
        axis = int(params.get("axis", 0))
        g = g * np.exp(2.0 * amplitude * np.sin(mode * x[axis]))
    elif preset == "anisotropic":
        amplitudes = tuple(float(a) for a in params.get("amplitudes", (0.1, 0.1, 0.1)))
        axes = tuple(int(a) for a in params.get("axes", (1, 2, 0)))
        mode = int(params.get("mode", 1))
        if len(amplitudes) != DIM or len(axes) != DIM:
            raise ValueError("anisotropic preset needs three amplitudes and three axes")
        for i in range(DIM):
            g[i, i] = np.exp(2.0 * amplitudes[i] * np.sin(mode * x[axes[i]]))
    elif preset == "random-smooth":
        seed = int(params.get("seed", 0))
        amplitude = float(params.get("amplitude", 0.1))
        max_mode = int(params.get("max_mode", 2))
        rng = np.random.default_rng(seed)
        for i, j in SYM_PAIRS:
            component = amplitude * _trig_field(rng, grid, max_mode, terms=4)
            g[i, j] = g[i, j] + component
            if i != j:
                g[j, i] = g[j, i] + component
    else:
        raise ValueError(f"unknown metric preset {preset!r} (expected one of {', '.join(METRIC_PRESETS)})")
    metric = MetricField.from_components(g, grid)
    logger.debug("Built %s metric on N=%d", preset, grid.n)
    return metric


def scalar_from_preset(preset: str, params: Mapping, grid: Grid) -> np.ndarray:
    """Scalar profiles for heat data and terminal conjugate densities."""
    x = grid.coordinates()
    if preset == "uniform":
        return np.full(grid.shape, float(params.get("value", 1.0)))
    if preset == "zero":
        return np.zeros(grid.shape)
    if preset == "fourier":
        k = tuple(int(c) for c in params.get("k", (1, 0, 0)))
        amplitude = float(params.get("amplitude", 1.0))
        offset = float(params.get("offset", 0.0))
        if not any(k):
            return np.full(grid.shape, offset + amplitude)
        return offset + amplitude * np.sin(k[0] * x[0] + k[1] * x[1] + k[2] * x[2])
    if preset == "mode":
        amplitude = float(params.get("amplitude", 0.1))
        mode = int(params.get("mode", 1))
        return 1.0 + amplitude * np.sin(mode * x[0])
    if preset == "bump":
        kappa = float(params.get("kappa", 1.0))
        center = tuple(float(c) for c in params.get("center", (np.pi, np.pi, np.pi)))
        return np.exp(kappa * sum(np.cos(x[a] - center[a]) for a in range(DIM)))
    if preset == "random":
        rng = np.random.default_rng(int(params.get("seed", 0)))
        amplitude = float(params.get("amplitude", 1.0))
        offset = float(params.get("offset", 0.0))
        return offset + amplitude * _trig_field(rng, grid, int(params.get("max_mode", 2)), terms=6)
    raise ValueError(f"unknown scalar preset {preset!r} (expected one of {', '.join(SCALAR_PRESETS)})")


# --- connection and curvature -----------------------------------------------

def christoffel(metric: MetricField) -> np.ndarray:
    """Gamma^k_ij as a (3, 3, 3, N, N, N) array indexed [k, i, j]."""
    dg = partials(metric.g, metric.grid)  # [l, i, j] = d_l g_ij
    lowered = 0.5 * (
        np.einsum("ijl...->lij...", dg) + np.einsum("jil...->lij...", dg) - dg
    )
    return np.einsum("kl...,lij...->kij...", metric.inverse, lowered)


def ricci(metric: MetricField, gamma: np.ndarray | None = None) -> np.ndarray:
    """R_ij = d_k G^k_ij - d_i G^k_kj + G^k_kl G^l_ij - G^k_il G^l_kj, symmetrized."""
    grid = metric.grid
    if gamma is None:
        gamma = christoffel(metric)
    contracted = np.einsum("kkj...->j...", gamma)
    ric = sum(partial(gamma[k], k, grid) for k in range(DIM))
    ric = ric - np.stack([partial(contracted, i, grid) for i in range(DIM)])
    ric = ric + np.einsum("l...,lij...->ij...", contracted, gamma)
    ric = ric - np.einsum("kil...,lkj...->ij...", gamma, gamma)
    return 0.5 * (ric + _transpose(ric))


def scalar_curvature(metric: MetricField, ric: np.ndarray | None = None) -> np.ndarray:
    if ric is None:
        ric = ricci(metric)
    return np.einsum("ij...,ij...->...", metric.inverse, ric)


# --- first and second derivatives -------------------------------------------

def gradient(u: np.ndarray, metric: MetricField) -> np.ndarray:
    """(grad u)^i = g^ij d_j u."""
    return np.einsum("ij...,j...->i...", metric.inverse, partials(u, metric.grid))


def metric_inner(du: np.ndarray, dw: np.ndarray, metric: MetricField) -> np.ndarray:
    """<grad u, grad w> = g^ij d_i u d_j w from coordinate differentials."""
    return np.einsum("ij...,i...,j...->...", metric.inverse, du, dw)


def grad_norm_sq(u: np.ndarray, metric: MetricField) -> np.ndarray:
    du = partials(u, metric.grid)
    return metric_inner(du, du, metric)


def tensor_on_gradients(tensor: np.ndarray, du: np.ndarray, dw: np.ndarray,
                        metric: MetricField) -> np.ndarray:
    """T(grad u, grad w) = T_ij (g^ik d_k u)(g^jl d_l w)."""
    raised_u = np.einsum("ik...,k...->i...", metric.inverse, du)
    raised_w = np.einsum("jl...,l...->j...", metric.inverse, dw)
    return np.einsum("ij...,i...,j...->...", tensor, raised_u, raised_w)


def hessian(u: np.ndarray, metric: MetricField, gamma: np.ndarray | None = None) -> np.ndarray:
    """(Hess u)_ij = d_i d_j u - Gamma^k_ij d_k u.

    The diagonal second derivatives use the staggered pairing of the
    stiffness form, so g^ij Hess_ij matches laplace_beltrami exactly
    whenever the metric is spatially constant.
    """
    grid = metric.grid
    if gamma is None:
        gamma = christoffel(metric)
    du = partials(u, grid)
    hess = np.empty((DIM, DIM) + grid.shape)
    for i in range(DIM):
        hess[i, i] = -staggered_difference_transpose(staggered_difference(u, i, grid), i, grid)
        for j in range(i + 1, DIM):
            hess[i, j] = partial(du[j], i, grid)
            hess[j, i] = hess[i, j]
    return hess - np.einsum("kij...,k...->ij...", gamma, du)


# --- divergence-form operators ----------------------------------------------

class StiffnessOperator:
    """Symmetric stiffness form K_A for a coefficient field A^ij = weight g^ij."""

    def __init__(self, coefficient: np.ndarray, grid: Grid):
        self.grid = grid
        self.coefficient = coefficient
        self._faces = [midpoint(coefficient[i, i], i, grid) for i in range(DIM)]

    @classmethod
    def for_metric(cls, metric: MetricField, weight: np.ndarray | None = None) -> "StiffnessOperator":
        density = metric.sqrt_det if weight is None else weight * metric.sqrt_det
        return cls(density * metric.inverse, metric.grid)

    def apply(self, u: np.ndarray) -> np.ndarray:
        grid = self.grid
        out = np.zeros(grid.shape)
        centred = [partial(u, j, grid) for j in range(DIM)]
        for i in range(DIM):
            flux = self._faces[i] * staggered_difference(u, i, grid)
            out += staggered_difference_transpose(flux, i, grid)
            mixed = sum(self.coefficient[i, j] * centred[j] for j in range(DIM) if j != i)
            out += _difference_transpose(mixed, _CENTERED[grid.fd_order], i, grid.spacing)
        return out

    def diagonal(self) -> np.ndarray:
        """Diagonal of K_A; the mixed centred terms contribute nothing."""
        grid = self.grid
        out = np.zeros(grid.shape)
        for i in range(DIM):
            for a, b, c in _STAGGERED[grid.fd_order]:
                out += c * c * (_shift(self._faces[i], -a, i) + _shift(self._faces[i], -b, i))
        return out / grid.spacing ** 2


def laplace_beltrami(u: np.ndarray, metric: MetricField) -> np.ndarray:
    """Delta_g u = (sqrt det g)^-1 d_i(sqrt det g g^ij d_j u), self-adjoint in d mu."""
    return -StiffnessOperator.for_metric(metric).apply(u) / metric.sqrt_det


def drifting_laplacian(u: np.ndarray, metric: MetricField, H: np.ndarray) -> np.ndarray:
    """L_f u = (H sqrt det g)^-1 d_i(H sqrt det g g^ij d_j u), self-adjoint in dV."""
    require_positive("H", H)
    weight = H * metric.sqrt_det
    return -StiffnessOperator.for_metric(metric, H).apply(u) / weight


def drifting_laplacian_nondivergence(u: np.ndarray, metric: MetricField, H: np.ndarray) -> np.ndarray:
    """Delta u - <grad f, grad u> = Delta u + <grad H, grad u> / H."""
    require_positive("H", H)
    grid = metric.grid
    drift = metric_inner(partials(H, grid), partials(u, grid), metric) / H
    return laplace_beltrami(u, metric) + drift


def dirichlet_form(u: np.ndarray, w: np.ndarray, metric: MetricField,
                   H: np.ndarray | None = None) -> float:
    """Half-node flux form of int <grad u, grad w> dV (dV = H d mu, or d mu if H is None).

    Equals -int u L_f w dV exactly at the discrete level.
    """
    stiffness = StiffnessOperator.for_metric(metric, H)
    return float(np.sum(u * stiffness.apply(w))) * metric.grid.cell_volume


def bakry_emery(metric: MetricField, H: np.ndarray, ric: np.ndarray | None = None,
                gamma: np.ndarray | None = None) -> np.ndarray:
    """Ric_f = Ric + Hess f with f = -log H up to a spatial constant."""
    require_positive("H", H)
    if gamma is None:
        gamma = christoffel(metric)
    if ric is None:
        ric = ricci(metric, gamma)
    dH = partials(H, metric.grid)
    hess_f = -hessian(H, metric, gamma) / H + np.einsum("i...,j...->ij...", dH, dH) / H ** 2
    return ric + hess_f


def potential(H: np.ndarray, tau: float) -> np.ndarray:
    """f = -log((4 pi tau)^((m+1)/2) H), defined only while tau > 0."""
    if tau <= 0.0:
        raise ValueError(f"potential is undefined at tau = {tau}")
    require_positive("H", H)
    return -np.log((4.0 * np.pi * tau) ** ((M + 1) / 2.0) * H)


# --- norms and quadrature ---------------------------------------------------

def tensor_norm_sq(tensor: np.ndarray, metric: MetricField) -> np.ndarray:
    """|T|^2 = g^ik g^jl T_ij T_kl."""
    mixed = np.einsum("ik...,kj...->ij...", metric.inverse, tensor)
    return np.einsum("ij...,ji...->...", mixed, mixed)


def integrate(u: np.ndarray, density: np.ndarray, grid: Grid) -> float:
    """Node sum of u times a measure density (sqrt det g for d mu, H sqrt det g for dV)."""
    return float(np.sum(u * density)) * grid.cell_volume
