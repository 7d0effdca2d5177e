import json
from pathlib import Path

import pytest

from src.main import EXIT_ABORT, EXIT_CONFIG, EXIT_FAILED, EXIT_OK, main, run_command

TINY = """\
# Small flat run exercising every stage
GRID_N=12
FLOW_T=0.02
FLOW_MAX_DT=2e-3
HEAT_V0=fourier
HEAT_V0_PARAMS=k=1,0,0
WINDOW_T0=0.004
WINDOW_T1=0.016
WEIGHT_K=constant
WEIGHT_K_PARAMS=4
TOL_IDENTITY=5e-2
EIGEN_STRIDE=3
"""


def _scenario(tmp_path: Path, text: str, name: str = "tiny") -> Path:
    path = tmp_path / f"{name}.env"
    path.write_text(text, encoding="utf-8")
    return path


def _exit_code(argv) -> int:
    with pytest.raises(SystemExit) as info:
        main(argv)
    return info.value.code


class TestRun:
    def test_tiny_run_passes_and_writes_artifacts(self, tmp_path):
        path = _scenario(tmp_path, TINY)
        out = tmp_path / "out"
        assert _exit_code(["--output-dir", str(out), "run", str(path)]) == EXIT_OK
        folder = out / "tiny"
        report = json.loads((folder / "report.json").read_text())
        assert report["status"] == "completed"
        assert report["passed"] is True
        assert report["verdict"]["monotonicity"] == "constant"
        names = {c["name"] for c in report["checks"]}
        assert {"frequency-monotonicity", "rigidity-eigenfunction", "I-derivative",
                "eigenvalue-monotonicity", "unit-mass"} <= names
        assert (folder / "timeseries.csv").is_file()
        assert (folder / "plots.svg").is_file()

    def test_artifacts_are_deterministic(self, tmp_path):
        path = _scenario(tmp_path, TINY + "CHECK_EIGEN=false\n")
        assert run_command("run", str(path), tmp_path / "a") == EXIT_OK
        assert run_command("run", str(path), tmp_path / "b") == EXIT_OK
        for name in ("timeseries.csv", "report.json", "plots.svg"):
            assert (tmp_path / "a" / "tiny" / name).read_bytes() == (tmp_path / "b" / "tiny" / name).read_bytes()

    def test_eigenfunction_heat_data_checks_the_frequency_chain(self, tmp_path):
        path = _scenario(tmp_path, TINY.replace("HEAT_V0=fourier", "HEAT_V0=eigenfunction"))
        assert run_command("run", str(path), tmp_path / "out") == EXIT_OK
        folder = tmp_path / "out" / "tiny"
        report = json.loads((folder / "report.json").read_text())
        eigen = next(c for c in report["checks"] if c["name"] == "eigenvalue-monotonicity")
        assert eigen["passed"] is True
        assert eigen["start_residual"] <= 1e-6
        assert eigen["chain_margin"] >= -1e-6
        first = (folder / "timeseries.csv").read_text().splitlines()[1]
        assert float(first.split(",")[0]) == pytest.approx(0.004, abs=1e-12)

    def test_failed_check_exits_one(self, tmp_path):
        path = _scenario(tmp_path, TINY + "CHECK_EIGEN=false\nTOL_MEASURE=1e-30\nTOL_IDENTITY=1e-30\n")
        assert run_command("run", str(path), tmp_path / "out") == EXIT_FAILED

    def test_bad_config_exits_two(self, tmp_path, capsys):
        path = _scenario(tmp_path, "WINDOW_T0=0.05\nWINDOW_T1=0.02\n")
        assert _exit_code(["run", str(path)]) == EXIT_CONFIG
        assert "WINDOW_T0" in capsys.readouterr().err

    def test_unknown_scenario_exits_two(self):
        assert run_command("run", "no-such-scenario", None) == EXIT_CONFIG

    def test_abort_flushes_partial_report(self, tmp_path):
        text = "GRID_N=8\nFLOW_T=1\nFLOW_SAFETY=50\nWINDOW_T0=0.1\nWINDOW_T1=0.5\n"
        path = _scenario(tmp_path, text, name="unstable")
        assert run_command("run", str(path), tmp_path / "out") == EXIT_ABORT
        report = json.loads((tmp_path / "out" / "unstable" / "report.json").read_text())
        assert report["status"] == "aborted"
        assert report["abort"]["error"] == "FlowAbort"
        assert report["passed"] is False


class TestOtherCommands:
    def test_eigen_on_flat_uniform(self, tmp_path):
        assert run_command("eigen", "flat-uniform", tmp_path) == EXIT_OK
        document = json.loads((tmp_path / "flat-uniform" / "eigen.json").read_text())
        assert {c["name"] for c in document["checks"]} == {"eigen-residual", "discrete-symbol"}

    def test_audit_tiny(self, tmp_path):
        path = _scenario(tmp_path, TINY)
        assert run_command("audit", str(path), tmp_path) == EXIT_OK
        document = json.loads((tmp_path / "tiny" / "audit.json").read_text())
        assert {"self-adjoint", "bochner", "reilly"} <= {c["name"] for c in document["checks"]}

    def test_converge_single_study(self, tmp_path):
        path = _scenario(tmp_path, "CONVERGE_STUDY=hessian-oracle\nCONVERGE_SIZES=16,32\n", name="hess")
        assert run_command("converge", str(path), tmp_path) == EXIT_OK
        assert (tmp_path / "hess" / "convergence.csv").is_file()


@pytest.mark.slow
class TestBundledRuns:
    @pytest.mark.parametrize("name", ["flat-rigidity", "flat-strict", "flat-mirrored", "flat-mode-zero",
                                      "perturbed-monotone", "perturbed-mirrored", "perturbed-forced",
                                      "perturbed-eigenfunction"])
    def test_bundled_scenario_passes(self, tmp_path, name):
        assert run_command("run", name, tmp_path) == EXIT_OK
