import numpy as np
import pytest
from hypothesis import settings

from src.flow import StepPolicy, evolve_flow, solve_conjugate_heat, solve_heat
from src.tensor_grid import Grid, metric_from_preset, scalar_from_preset

settings.register_profile("default", max_examples=10, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid8():
    return Grid(8, 4)


@pytest.fixture(scope="session")
def grid16():
    return Grid(16, 4)


@pytest.fixture(scope="session")
def flat16(grid16):
    return metric_from_preset("flat", {}, grid16)


@pytest.fixture(scope="session")
def wavy8(grid8):
    """Seeded random-smooth metric, the standard non-trivial input."""
    return metric_from_preset("random-smooth", {"seed": 3, "amplitude": 0.1, "max_mode": 1}, grid8)


def flat_run(grid, T, v0, max_dt=1e-3):
    """Flat flow with uniform terminal density and an unforced heat pass."""
    history = evolve_flow(metric_from_preset("flat", {}, grid), T, StepPolicy(max_dt=max_dt))
    history = solve_conjugate_heat(history, np.ones(grid.shape))
    return solve_heat(history, v0)


@pytest.fixture(scope="session")
def flat_sine_run(grid8):
    """N=8 flat flow to T=0.05 with v0 = sin x^1."""
    return flat_run(grid8, 0.05, scalar_from_preset("fourier", {"k": (1, 0, 0)}, grid8))
