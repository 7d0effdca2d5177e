import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.config import EPS_PD
from src.tensor_grid import (
    SYM_PAIRS,
    Grid,
    MetricError,
    MetricField,
    StiffnessOperator,
    _trig_field,
    bakry_emery,
    christoffel,
    dirichlet_form,
    discrete_symbol,
    drifting_laplacian,
    drifting_laplacian_nondivergence,
    grad_norm_sq,
    gradient,
    hessian,
    identity_tensor,
    integrate,
    laplace_beltrami,
    metric_from_preset,
    partials,
    potential,
    ricci,
    scalar_curvature,
    scalar_from_preset,
    tensor_norm_sq,
)


class TestGrid:
    def test_spacing_and_cell_volume(self):
        grid = Grid(16, 4)
        assert grid.spacing == pytest.approx(2 * np.pi / 16)
        assert grid.cell_volume == pytest.approx(grid.spacing ** 3)
        assert grid.shape == (16, 16, 16)

    def test_rejects_coarse_grid(self):
        with pytest.raises(ValueError, match="at least 8"):
            Grid(4)

    def test_rejects_unknown_order(self):
        with pytest.raises(ValueError, match="fd_order"):
            Grid(8, 3)


class TestMetricField:
    def test_flat_preset_is_identity(self, grid8):
        metric = metric_from_preset("flat", {}, grid8)
        assert np.array_equal(metric.g, identity_tensor(grid8))
        assert np.allclose(metric.sqrt_det, 1.0)

    def test_indefinite_metric_reports_worst_eigenvalue(self, grid8):
        g = identity_tensor(grid8)
        g[2, 2, 1, 2, 3] = -0.5
        with pytest.raises(MetricError, match="not positive definite") as info:
            MetricField.from_components(g, grid8)
        assert info.value.worst_eigenvalue == pytest.approx(-0.5)

    def test_asymmetric_metric_rejected(self, grid8):
        g = identity_tensor(grid8)
        g[0, 1] += 0.1
        with pytest.raises(MetricError, match="symmetric"):
            MetricField.from_components(g, grid8)

    def test_random_smooth_is_seeded(self, grid8):
        a = metric_from_preset("random-smooth", {"seed": 5}, grid8)
        b = metric_from_preset("random-smooth", {"seed": 5}, grid8)
        assert np.array_equal(a.g, b.g)

    def test_unknown_preset(self, grid8):
        with pytest.raises(ValueError, match="unknown metric preset"):
            metric_from_preset("sphere", {}, grid8)

    def test_conformal_preset_closed_form(self, grid16):
        metric = metric_from_preset("conformal", {"amplitude": 0.1}, grid16)
        x = grid16.coordinates()
        assert np.allclose(metric.g, np.exp(0.2 * np.sin(x[0])) * identity_tensor(grid16), rtol=1e-14, atol=0.0)
        assert np.allclose(metric.sqrt_det, np.exp(0.3 * np.sin(x[0])), rtol=1e-12)

    def test_large_random_smooth_rejected_exactly_when_indefinite(self, grid8):
        rng = np.random.default_rng(7)
        g = identity_tensor(grid8)
        for i, j in SYM_PAIRS:
            component = 0.5 * _trig_field(rng, grid8, 2, terms=4)
            g[i, j] = g[i, j] + component
            if i != j:
                g[j, i] = g[j, i] + component
        worst = float(np.min(np.linalg.eigvalsh(np.moveaxis(g, (0, 1), (-2, -1)))))
        if worst <= EPS_PD:
            with pytest.raises(MetricError, match="not positive definite") as info:
                metric_from_preset("random-smooth", {"seed": 7, "amplitude": 0.5}, grid8)
            assert info.value.worst_eigenvalue == pytest.approx(worst, rel=1e-10, abs=1e-14)
        else:
            metric = metric_from_preset("random-smooth", {"seed": 7, "amplitude": 0.5}, grid8)
            assert np.array_equal(metric.g, g)


class TestCurvature:
    def test_flat_metric_has_no_curvature(self, grid8):
        metric = metric_from_preset("flat", {}, grid8)
        assert np.max(np.abs(christoffel(metric))) <= 1e-12
        assert np.max(np.abs(ricci(metric))) <= 1e-12
        assert np.max(np.abs(scalar_curvature(metric))) <= 1e-12

    def test_constant_scaling_keeps_ricci_zero(self, grid8):
        metric = MetricField.from_components(2.5 * identity_tensor(grid8), grid8)
        assert np.max(np.abs(ricci(metric))) <= 1e-12

    def test_ricci_is_symmetric(self, wavy8):
        ric = ricci(wavy8)
        assert np.array_equal(ric, np.swapaxes(ric, 0, 1))

    def test_christoffel_of_warped_axis(self):
        grid = Grid(32, 4)
        x = grid.coordinates()
        g = identity_tensor(grid)
        g[0, 0] = np.exp(0.2 * np.sin(x[0]))
        gamma = christoffel(MetricField.from_components(g, grid))
        assert np.max(np.abs(gamma[0, 0, 0] - 0.1 * np.cos(x[0]))) <= 1e-4
        gamma[0, 0, 0] = 0.0
        assert np.max(np.abs(gamma)) <= 1e-14


class TestGradients:
    def test_grad_norm_on_stretched_axis(self):
        grid = Grid(32, 4)
        g = identity_tensor(grid)
        g[0, 0] = 4.0
        metric = MetricField.from_components(g, grid)
        x = grid.coordinates()
        u = np.sin(x[0])
        assert np.max(np.abs(grad_norm_sq(u, metric) - 0.25 * np.cos(x[0]) ** 2)) <= 1e-4

    def test_gradient_lowers_to_differential(self, wavy8, grid8):
        u = scalar_from_preset("random", {"seed": 1}, grid8)
        lowered = np.einsum("ij...,j...->i...", wavy8.g, gradient(u, wavy8))
        assert np.allclose(lowered, partials(u, grid8), rtol=1e-12, atol=1e-12)

    def test_gradient_on_conformal_metric(self):
        grid = Grid(32, 4)
        metric = metric_from_preset("conformal", {"amplitude": 0.1}, grid)
        x = grid.coordinates()
        grad = gradient(np.sin(x[0]), metric)
        assert np.max(np.abs(grad[0] - np.exp(-0.2 * np.sin(x[0])) * np.cos(x[0]))) <= 1e-4
        assert np.max(np.abs(grad[1:])) <= 1e-14


class TestLaplacians:
    @pytest.mark.parametrize("order", [2, 4])
    def test_flat_sine_is_a_discrete_eigenfunction(self, order):
        grid = Grid(16, order)
        metric = metric_from_preset("flat", {}, grid)
        u = scalar_from_preset("fourier", {"k": (0, 1, 0)}, grid)
        assert np.max(np.abs(laplace_beltrami(u, metric) + discrete_symbol(grid, 1) * u)) <= 1e-12

    def test_second_order_symbol(self):
        grid = Grid(8, 2)
        h = grid.spacing
        assert discrete_symbol(grid, 1) == pytest.approx((2 - 2 * np.cos(h)) / h ** 2, rel=1e-14)

    def test_uniform_H_drift_matches_laplace_beltrami(self, wavy8, grid8):
        u = scalar_from_preset("random", {"seed": 1}, grid8)
        H = np.full(grid8.shape, 0.7)
        assert np.allclose(drifting_laplacian(u, wavy8, H), laplace_beltrami(u, wavy8), atol=1e-12)

    def test_drift_forms_agree_under_refinement(self):
        errors = []
        for n in (16, 32):
            grid = Grid(n, 4)
            metric = metric_from_preset("conformal", {"amplitude": 0.1}, grid)
            H = scalar_from_preset("bump", {"kappa": 0.3}, grid)
            u = scalar_from_preset("fourier", {"k": (1, 1, 0)}, grid)
            diff = drifting_laplacian(u, metric, H) - drifting_laplacian_nondivergence(u, metric, H)
            errors.append(float(np.max(np.abs(diff))))
        assert errors[1] < errors[0] / 8

    def test_drift_rejects_nonpositive_weight(self, flat16, grid16):
        with pytest.raises(ValueError, match="strictly positive"):
            drifting_laplacian(np.ones(grid16.shape), flat16, np.zeros(grid16.shape))

    def test_hessian_trace_matches_laplacian_on_constant_metric(self, grid8):
        metric = MetricField.from_components(1.5 * identity_tensor(grid8), grid8)
        u = scalar_from_preset("random", {"seed": 2}, grid8)
        trace = np.einsum("ij...,ij...->...", metric.inverse, hessian(u, metric))
        assert np.allclose(trace, laplace_beltrami(u, metric), atol=1e-11)

    def test_dirichlet_form_is_minus_pairing_with_drift_laplacian(self, wavy8, grid8):
        H = scalar_from_preset("bump", {"kappa": 0.5}, grid8)
        u = scalar_from_preset("random", {"seed": 4}, grid8)
        w = scalar_from_preset("random", {"seed": 5}, grid8)
        pairing = integrate(u * drifting_laplacian(w, wavy8, H), H * wavy8.sqrt_det, grid8)
        assert dirichlet_form(u, w, wavy8, H) == pytest.approx(-pairing, rel=1e-12)

    @given(seed=st.integers(min_value=0, max_value=10_000))
    def test_stiffness_is_symmetric(self, seed):
        grid = Grid(8, 4)
        metric = metric_from_preset("random-smooth", {"seed": seed, "amplitude": 0.2, "max_mode": 2}, grid)
        stiffness = StiffnessOperator.for_metric(metric)
        rng = np.random.default_rng(seed)
        u = rng.standard_normal(grid.shape)
        w = rng.standard_normal(grid.shape)
        left = float(np.sum(u * stiffness.apply(w)))
        right = float(np.sum(w * stiffness.apply(u)))
        assert abs(left - right) <= 1e-12 * max(abs(left), 1.0)

    def test_stiffness_diagonal_matches_unit_vector(self, wavy8, grid8):
        stiffness = StiffnessOperator.for_metric(wavy8)
        e = np.zeros(grid8.shape)
        e[3, 4, 5] = 1.0
        assert stiffness.apply(e)[3, 4, 5] == pytest.approx(stiffness.diagonal()[3, 4, 5], rel=1e-12)


class TestWeightedTensors:
    def test_uniform_H_gives_ricci(self, wavy8, grid8):
        H = np.full(grid8.shape, 2.0)
        assert np.allclose(bakry_emery(wavy8, H), ricci(wavy8), atol=1e-12)

    def test_uniform_H_on_flat_gives_zero(self, flat16, grid16):
        assert np.max(np.abs(bakry_emery(flat16, np.ones(grid16.shape)))) <= 1e-12

    def test_flat_bakry_emery_is_hessian_of_potential(self):
        grid = Grid(32, 4)
        flat = metric_from_preset("flat", {}, grid)
        x = grid.coordinates()
        H = np.exp(-0.2 * np.sin(x[0]))
        ric_f = bakry_emery(flat, H)
        expected = np.zeros_like(ric_f)
        expected[0, 0] = -0.2 * np.sin(x[0])
        assert np.allclose(ric_f, hessian(-np.log(H), flat), rtol=0.0, atol=1e-4)
        assert np.allclose(ric_f, expected, rtol=0.0, atol=1e-4)

    def test_norm_of_scaled_metric(self, wavy8):
        # |m g|^2 = m^2 tr(id) whatever g is
        assert np.allclose(tensor_norm_sq(2.0 * wavy8.g, wavy8), 12.0, rtol=0.0, atol=1e-10)

    def test_potential_requires_positive_tau(self, grid8):
        with pytest.raises(ValueError, match="undefined"):
            potential(np.ones(grid8.shape), 0.0)

    def test_potential_of_heat_kernel_normalisation(self, grid8):
        tau = 0.25
        H = np.full(grid8.shape, 1.0 / (4 * np.pi * tau) ** 1.5)
        assert np.allclose(potential(H, tau), 0.0, atol=1e-12)


class TestQuadrature:
    def test_mean_of_sine_squared(self, grid16):
        u = scalar_from_preset("fourier", {"k": (1, 0, 0)}, grid16)
        density = np.full(grid16.shape, 1.0 / (2 * np.pi) ** 3)
        assert integrate(u * u, density, grid16) == pytest.approx(0.5, abs=1e-14)
