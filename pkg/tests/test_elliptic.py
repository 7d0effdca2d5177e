import numpy as np
import pytest

from src.config import M
from src.elliptic import (
    EllipticConfig,
    PressureViolation,
    SolverError,
    _check_floor,
    p_bar,
    solve_helmholtz,
    solve_pressure,
    solve_pressure_general,
)
from src.tensor_grid import discrete_symbol, laplace_beltrami, ricci, scalar_from_preset


class TestHelmholtz:
    def test_flat_sine_matches_discrete_symbol(self, flat16, grid16):
        s = scalar_from_preset("fourier", {"k": (1, 0, 0)}, grid16)
        u = solve_helmholtz(flat16, 1.0, 2.0 * s)
        expected = 2.0 / (discrete_symbol(grid16, 1) + 1.0) * s
        assert np.max(np.abs(u - expected)) <= 1e-9

    def test_flat_sine_close_to_continuum(self, flat16, grid16):
        s = scalar_from_preset("fourier", {"k": (1, 0, 0)}, grid16)
        u = solve_helmholtz(flat16, 1.0, 2.0 * s)
        assert np.max(np.abs(u - s)) <= 1e-3

    def test_residual_on_curved_metric(self, wavy8, grid8):
        F = scalar_from_preset("random", {"seed": 9, "offset": 1.0}, grid8)
        u = solve_helmholtz(wavy8, 3.0, F)
        residual = -laplace_beltrami(u, wavy8) + 3.0 * u - F
        assert np.max(np.abs(residual * np.sqrt(wavy8.sqrt_det))) <= 1e-8 * np.max(np.abs(F))

    def test_zero_rhs_gives_zero(self, flat16, grid16):
        assert not np.any(solve_helmholtz(flat16, 2.0, np.zeros(grid16.shape)))

    @pytest.mark.parametrize("c", [0.0, -1.0])
    def test_nonpositive_shift_rejected(self, flat16, grid16, c):
        with pytest.raises(ValueError, match="positive"):
            solve_helmholtz(flat16, c, np.ones(grid16.shape))

    def test_iteration_cap_raises_solver_error(self, wavy8, grid8):
        F = scalar_from_preset("random", {"seed": 1}, grid8)
        cfg = EllipticConfig(rel_tolerance=1e-14, max_iterations=1)
        with pytest.raises(SolverError) as info:
            solve_helmholtz(wavy8, 1.0, F, cfg)
        assert info.value.iterations >= 1
        assert info.value.residual > 1e-14

    def test_config_validation(self):
        with pytest.raises(ValueError, match="preconditioner"):
            EllipticConfig(preconditioner="multigrid")
        with pytest.raises(ValueError, match="rel_tolerance"):
            EllipticConfig(rel_tolerance=0.0)


class TestPressure:
    def test_flat_pressure_is_two(self, flat16):
        p = solve_pressure(flat16)
        assert np.max(np.abs(p - 2.0)) <= 1e-8
        assert p_bar(p) == pytest.approx(2.0, abs=1e-8)

    def test_einstein_injection_gives_zero(self, wavy8):
        p = solve_pressure(wavy8, ric=-M * wavy8.g)
        assert np.max(np.abs(p)) <= 1e-12

    def test_general_mode_at_model_constant_agrees(self, wavy8):
        ric = ricci(wavy8)
        model = solve_pressure(wavy8, ric=ric)
        general = solve_pressure_general(wavy8, -6.0, ric=ric)
        assert np.max(np.abs(model - general)) <= 1e-8

    def test_pressure_is_nonnegative_on_perturbed_metric(self, wavy8):
        assert np.min(solve_pressure(wavy8)) >= -1e-8

    @pytest.mark.parametrize("r0", [0.0, 1.0])
    def test_general_mode_needs_negative_r0(self, wavy8, r0):
        with pytest.raises(ValueError, match="R0 must be negative"):
            solve_pressure_general(wavy8, r0)

    def test_floor_violation(self, grid8):
        p = np.zeros(grid8.shape)
        p[0, 0, 0] = -1e-6
        with pytest.raises(PressureViolation) as info:
            _check_floor(p)
        assert info.value.min_pressure == pytest.approx(-1e-6)
