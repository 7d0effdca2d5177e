import numpy as np
import pytest

from src.auditor import (
    check_bochner,
    check_conjugate_equation,
    check_evolution_identities,
    check_measure_and_pressure,
    check_potential_equation,
    check_pressure_bound,
    check_reilly,
    check_selfadjoint,
    convergence_study,
    observed_order,
)
from src.tensor_grid import Grid, identity_tensor, metric_from_preset, scalar_from_preset
from tests.conftest import flat_run


def _by_name(results):
    return {r.name: r for r in results}


class TestSingleTimeIdentities:
    def test_selfadjoint_on_curved_metric(self, wavy8, grid8):
        H = scalar_from_preset("bump", {"kappa": 0.3}, grid8)
        result = check_selfadjoint(wavy8, H, seed=3)
        assert result.passed
        assert result.residual <= 1e-12

    def test_bochner_on_curved_metric(self):
        grid = Grid(32, 4)
        metric = metric_from_preset("random-smooth", {"seed": 0, "amplitude": 0.1, "max_mode": 1}, grid)
        H = scalar_from_preset("bump", {"kappa": 0.3}, grid)
        u = scalar_from_preset("random", {"seed": 1, "max_mode": 1}, grid)
        assert check_bochner(metric, H, u, tolerance=1e-3).passed

    def test_reilly_exact_for_flat_sine(self, flat16, grid16):
        v = scalar_from_preset("fourier", {"k": (1, 0, 0)}, grid16)
        result = check_reilly(flat16, np.ones(grid16.shape), v, tolerance=1e-10)
        assert result.passed
        assert result.details["lhs"] > 0.0

    def test_pressure_bound_with_injected_ricci(self, grid8):
        eps = 0.1
        metric = metric_from_preset("flat", {}, grid8)
        ric = -2.0 * identity_tensor(grid8)
        ric[0, 0] += eps
        ric[1, 1] -= eps
        result = check_pressure_bound(metric, ric)
        assert result.passed and result.details["enforced"]
        assert result.details["p_max"] == pytest.approx(eps ** 2 / 3.0, rel=1e-8)
        assert result.details["K_sq"] == pytest.approx(12.0 + 2.0 * eps ** 2)

    def test_pressure_bound_skipped_off_model_curvature(self, flat16):
        result = check_pressure_bound(flat16, np.zeros((3, 3) + flat16.grid.shape))
        assert result.passed
        assert result.details["enforced"] is False


class TestRunIdentities:
    def test_measure_and_pressure_on_flat_run(self, flat_sine_run):
        results = _by_name(check_measure_and_pressure(flat_sine_run))
        assert all(r.passed for r in results.values())
        assert results["measure-dmu-literal"].details["enforced"] is False
        assert results["pressure-upper-bound"].details["enforced"] is False
        assert results["unit-mass"].residual <= 1e-8

    def test_conjugate_equation_on_flat_run(self, flat_sine_run):
        assert check_conjugate_equation(flat_sine_run, tolerance=1e-6).passed

    def test_potential_equation_on_flat_run(self, flat_sine_run):
        result = check_potential_equation(flat_sine_run, tau_min=0.01)
        assert result.passed
        assert result.details["steps"] >= 2

    def test_potential_equation_needs_room_before_T(self, flat_sine_run):
        result = check_potential_equation(flat_sine_run, tau_min=1.0)
        assert result.details["enforced"] is False

    def test_evolution_identities_on_flat_run(self, grid16):
        history = flat_run(grid16, 0.01, scalar_from_preset("fourier", {"k": (1, 0, 0)}, grid16))
        gradient_rate, heat_operator = check_evolution_identities(history, tolerance=2e-2)
        assert gradient_rate.passed
        assert heat_operator.passed


class TestConvergence:
    def test_observed_order(self):
        sizes = (16, 32, 64)
        assert observed_order(sizes, [3.0 * n ** -4.0 for n in sizes]) == pytest.approx(4.0)
        steps = (0.02, 0.01)
        assert observed_order(steps, [s ** 2 for s in steps], parameter="dt") == pytest.approx(2.0)

    @pytest.mark.parametrize("scenario", ["conformal-ricci-oracle", "laplacian-oracle", "hessian-oracle"])
    def test_oracles_converge_at_stencil_order(self, scenario):
        row = convergence_study(scenario, sizes=(16, 32))
        assert row.passed, row
        assert row.errors[1] < row.errors[0]

    def test_metric_decay_is_fourth_order_in_time(self):
        row = convergence_study("metric-decay")
        assert row.parameter == "dt"
        assert row.passed, row

    def test_selfadjoint_has_no_slope(self):
        row = convergence_study("self-adjoint", sizes=(8, 16))
        assert row.slope is None
        assert row.passed

    def test_unknown_scenario(self):
        with pytest.raises(ValueError, match="unknown convergence scenario"):
            convergence_study("spectral-gap")


@pytest.mark.slow
class TestRefinementAcceptance:
    @pytest.mark.parametrize("scenario", ["bochner", "reilly"])
    def test_identity_residuals_converge(self, scenario):
        assert convergence_study(scenario, sizes=(16, 32, 64)).passed
