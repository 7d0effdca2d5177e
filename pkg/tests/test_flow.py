import numpy as np
import pytest

from src.flow import (
    FlowAbort,
    HeatForcing,
    StepPolicy,
    crf_rhs,
    dump_snapshots,
    evolve_flow,
    measure_residual,
    solve_conjugate_heat,
    solve_forced_heat,
    solve_heat,
    terminal_density,
    time_derivative,
)
from src.tensor_grid import (
    Grid,
    discrete_symbol,
    identity_tensor,
    metric_from_preset,
    ricci,
    scalar_from_preset,
)
from tests.conftest import flat_run


def _heat_mode(grid, t):
    """Semi-discrete closed form of v_t = Delta v + 2 v on the shrinking flat torus, v0 = sin x^1."""
    lam = discrete_symbol(grid, 1)
    return np.exp(2.0 * t - lam * (np.exp(8.0 * t) - 1.0) / 8.0)


class TestStepPolicy:
    def test_cap_applies(self, flat16):
        assert StepPolicy(max_dt=1e-4).dt(flat16) == 1e-4

    def test_stability_bound(self, flat16, grid16):
        assert StepPolicy(safety=0.25).dt(flat16) == pytest.approx(0.25 * grid16.spacing ** 2 / 3.0)

    @pytest.mark.parametrize("kwargs", [{"safety": 0.0}, {"max_dt": -1.0}])
    def test_rejects_nonpositive(self, kwargs):
        with pytest.raises(ValueError):
            StepPolicy(**kwargs)


class TestFlatFlow:
    def test_metric_decays_like_exp_minus_8t(self, flat_sine_run, grid8):
        T = flat_sine_run.times[-1]
        g = flat_sine_run.metric(len(flat_sine_run) - 1).g
        expected = np.exp(-8.0 * T) * identity_tensor(grid8)
        assert np.max(np.abs(g - expected)) / np.exp(-8.0 * T) <= 1e-8

    def test_pressure_constant(self, flat_sine_run):
        for state in flat_sine_run.states:
            assert np.max(np.abs(state.p - 2.0)) <= 1e-8

    def test_volume_shrinks_like_exp_minus_12t(self, flat_sine_run):
        last = len(flat_sine_run) - 1
        ratio = flat_sine_run.dmu(last) / flat_sine_run.dmu(0)
        assert np.allclose(ratio, np.exp(-12.0 * flat_sine_run.times[-1]), rtol=1e-8)

    def test_measure_identity(self, flat_sine_run):
        assert measure_residual(flat_sine_run) <= 1e-6
        assert flat_sine_run.diagnostics["measure_residual"] <= 1e-6

    def test_times_strictly_increase_and_end_at_T(self, flat_sine_run):
        assert np.all(np.diff(flat_sine_run.times) > 0)
        assert flat_sine_run.times[-1] == 0.05

    def test_rhs_general_mode_at_model_constant(self, wavy8):
        p = np.full(wavy8.grid.shape, 0.3)
        ric = ricci(wavy8)
        assert np.allclose(crf_rhs(wavy8, p, ric), crf_rhs(wavy8, p, ric, r0=-6.0), atol=1e-13)

    def test_rejects_nonpositive_final_time(self, flat16):
        with pytest.raises(ValueError, match="positive"):
            evolve_flow(flat16, 0.0)

    def test_overlong_step_aborts(self, grid8):
        g0 = metric_from_preset("flat", {}, grid8)
        with pytest.raises(FlowAbort) as info:
            evolve_flow(g0, 1.0, StepPolicy(safety=50.0))
        assert info.value.time > 0.0

    def test_since_drops_leading_steps(self, flat_sine_run):
        tail = flat_sine_run.since(3)
        assert len(tail) == len(flat_sine_run) - 3
        assert tail.times[0] == flat_sine_run.times[3]
        assert tail.H[0] is flat_sine_run.H[3]
        assert tail.v[0] is flat_sine_run.v[3]
        assert tail.T == flat_sine_run.T

    def test_since_keeps_two_steps(self, flat_sine_run):
        with pytest.raises(ValueError, match="fewer than two steps"):
            flat_sine_run.since(len(flat_sine_run) - 1)


class TestConjugateHeat:
    def test_flat_density_scales_exactly(self, flat_sine_run):
        T = flat_sine_run.times[-1]
        H_T = flat_sine_run.H[-1]
        for i, t in enumerate(flat_sine_run.times):
            assert np.allclose(flat_sine_run.H[i], H_T * np.exp(12.0 * (t - T)), rtol=1e-9)

    def test_unit_mass_every_step(self, flat_sine_run):
        for i in range(len(flat_sine_run)):
            assert abs(flat_sine_run.mass(i) - 1.0) <= 1e-8
        assert flat_sine_run.diagnostics["mass_drift"] <= 1e-8

    def test_perturbed_metric_keeps_mass_and_positivity(self, wavy8, grid8):
        history = evolve_flow(wavy8, 0.01, StepPolicy(max_dt=2e-3))
        H_T = terminal_density("mode", {"amplitude": 0.1}, grid8)
        history = solve_conjugate_heat(history, H_T)
        for i in range(len(history)):
            assert abs(history.mass(i) - 1.0) <= 1e-8
            assert np.min(history.H[i]) > 0.0

    def test_rejects_unknown_terminal_preset(self, grid8):
        with pytest.raises(ValueError, match="unknown terminal density"):
            terminal_density("fourier", {}, grid8)

    def test_rejects_nonpositive_terminal_density(self, flat_sine_run, grid8):
        with pytest.raises(ValueError, match="strictly positive"):
            solve_conjugate_heat(flat_sine_run, np.zeros(grid8.shape))


class TestHeat:
    def test_single_mode_closed_form(self, flat_sine_run, grid8):
        s = scalar_from_preset("fourier", {"k": (1, 0, 0)}, grid8)
        for i, t in enumerate(flat_sine_run.times):
            expected = _heat_mode(grid8, t) * s
            assert np.max(np.abs(flat_sine_run.v[i] - expected)) <= 1e-6

    def test_constant_mode_grows_like_exp_2t(self, grid8):
        history = flat_run(grid8, 0.02, np.ones(grid8.shape))
        assert np.allclose(history.v[-1], np.exp(0.04), rtol=1e-10)

    def test_inactive_forcing_is_pure_heat(self, flat_sine_run, grid8):
        s = scalar_from_preset("fourier", {"k": (1, 0, 0)}, grid8)
        history = solve_forced_heat(flat_sine_run, s, HeatForcing(active=False))
        lam = discrete_symbol(grid8, 1)
        t = flat_sine_run.times[-1]
        expected = np.exp(-lam * (np.exp(8.0 * t) - 1.0) / 8.0) * s
        assert np.max(np.abs(history.v[-1] - expected)) <= 1e-6

    def test_forcing_certificate_holds(self, flat_sine_run, grid8):
        v0 = scalar_from_preset("random", {"seed": 4, "offset": 0.5}, grid8)
        history = solve_forced_heat(flat_sine_run, v0, HeatForcing(0.5, 0.3))
        assert max(history.certificate) <= 1e-8

    def test_forcing_coefficients_bounded(self):
        with pytest.raises(ValueError, match=r"\|a\|, \|b\| <= 1"):
            HeatForcing(1.5, 0.0)

    def test_rejects_wrong_shape(self, flat_sine_run):
        with pytest.raises(ValueError, match="finite field"):
            solve_heat(flat_sine_run, np.ones((4, 4, 4)))


class TestTimeDerivative:
    def test_spline_derivative_of_exponential(self):
        t = np.linspace(0.0, 0.1, 41)
        d = time_derivative(t, np.exp(-12.0 * t))
        assert np.max(np.abs(d + 12.0 * np.exp(-12.0 * t))) <= 1e-5

    def test_short_series_falls_back_to_differences(self):
        d = time_derivative(np.array([0.0, 1.0, 2.0]), np.array([0.0, 2.0, 4.0]))
        assert np.allclose(d, 2.0)


class TestSnapshots:
    def test_record_layout(self, flat_sine_run, grid8, tmp_path):
        path = tmp_path / "snapshots.bin"
        dump_snapshots(flat_sine_run, path)
        record = 1 + 9 * grid8.n ** 3
        data = np.fromfile(path, dtype="<f8")
        assert data.size == record * len(flat_sine_run)
        assert data[0] == 0.0
        assert data[record] == flat_sine_run.times[1]


@pytest.mark.slow
class TestAcceptance:
    def test_flat_decay_and_pressure_at_n32(self):
        grid = Grid(32, 4)
        history = evolve_flow(metric_from_preset("flat", {}, grid), 0.1, StepPolicy(max_dt=1e-3))
        g = history.metric(len(history) - 1).g
        assert np.max(np.abs(g - np.exp(-0.8) * identity_tensor(grid))) / np.exp(-0.8) <= 1e-6
        assert all(np.max(np.abs(s.p - 2.0)) <= 1e-8 for s in history.states)

    def test_heat_mode_matches_continuum_at_n64(self):
        grid = Grid(64, 4)
        s = scalar_from_preset("fourier", {"k": (1, 0, 0)}, grid)
        history = flat_run(grid, 0.1, s)
        expected = np.exp(0.2 - (np.exp(0.8) - 1.0) / 8.0) * s
        assert np.max(np.abs(history.v[-1] - expected)) / np.max(np.abs(expected)) <= 1e-3
