import numpy as np
import pytest

from src.guardrails import (
    atomic_write_bytes,
    atomic_write_text,
    format_float,
    relative_residual,
    require_constant_sign,
    require_finite,
    require_positive,
)


class TestFieldChecks:
    def test_finite_accepts_ordinary_values(self):
        require_finite("u", np.array([0.0, -1.0, 1e300]))

    def test_finite_counts_bad_entries(self):
        with pytest.raises(ValueError, match="2 non-finite"):
            require_finite("u", np.array([np.nan, 1.0, np.inf]))

    def test_positive_rejects_zero(self):
        with pytest.raises(ValueError, match="strictly positive"):
            require_positive("H", np.array([1.0, 0.0]))

    def test_positive_rejects_nan_first(self):
        with pytest.raises(ValueError, match="non-finite"):
            require_positive("H", np.array([1.0, np.nan]))

    @pytest.mark.parametrize("values,sign", [([1.0, 2.0], 1), ([-3.0, -0.5], -1)])
    def test_constant_sign(self, values, sign):
        assert require_constant_sign("h", np.array(values)) == sign

    @pytest.mark.parametrize("values", [[1.0, -1.0], [0.0, 1.0]])
    def test_sign_change_rejected(self, values):
        with pytest.raises(ValueError, match="changes sign"):
            require_constant_sign("h", np.array(values))


class TestRelativeResidual:
    def test_exact_agreement(self):
        assert relative_residual(np.ones(3), np.ones(3)) == 0.0

    def test_both_sides_zero(self):
        assert relative_residual(np.zeros(3), np.zeros(3)) == 0.0

    def test_scaled_by_larger_side(self):
        assert relative_residual(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)

    def test_floor_limits_amplification(self):
        assert relative_residual(np.array([1e-14]), np.array([0.0]), floor=1.0) == pytest.approx(1e-14)


class TestOutput:
    def test_format_round_trips(self):
        value = 0.1 + 0.2
        assert float(format_float(value)) == value
        assert format_float(1.0) == "1"

    def test_atomic_write_creates_parents(self, tmp_path):
        path = tmp_path / "nested" / "dir" / "file.txt"
        atomic_write_text(path, "hello\n")
        assert path.read_text() == "hello\n"

    def test_atomic_write_replaces_and_leaves_no_temp(self, tmp_path):
        path = tmp_path / "data.bin"
        atomic_write_bytes(path, b"first")
        atomic_write_bytes(path, b"second")
        assert path.read_bytes() == b"second"
        assert [p.name for p in tmp_path.iterdir()] == ["data.bin"]
