"""Run artifacts: timeseries.csv, report.json and plots.svg.

Every file is written atomically and carries no wall-clock data, so two
runs of the same scenario produce identical bytes (plots excepted when
PLOT_TIMESTAMPS is enabled).
"""

import csv
import io
import json
import logging
import math
import subprocess
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from src.flow import FlowHistory
from src.frequency import EigenMonotonicity, FrequencyReport, IDerivativeCheck
from src.guardrails import atomic_write_bytes, atomic_write_text, format_float

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

TIMESERIES_COLUMNS = (
    "t",
    "Rmin",
    "Rmax",
    "pmin",
    "pmax",
    "p_bar",
    "I",
    "E",
    "Q",
    "dQdt",
    "lambda",
    "corrected_eigen",
    "k_used",
    "I_rate_residual",
    "cauchy_schwarz_gap",
    "mass_error",
    "certificate",
)

_PROJECT_ROOT = Path(__file__).resolve().parent.parent


def build_stamp() -> str:
    """`git describe --always --dirty` of the source tree, or "unknown" outside a checkout."""
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=_PROJECT_ROOT,
            capture_output=True,
            check=True,
            timeout=10,
        )
        return result.stdout.decode().strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def timeseries_rows(history: FlowHistory, report: FrequencyReport | None = None,
                    eigen: EigenMonotonicity | None = None,
                    rate_check: IDerivativeCheck | None = None) -> list[tuple[float, ...]]:
    """One row per stored step; window quantities are NaN outside [t0, t1]."""
    n = len(history)
    column = {name: np.full(n, np.nan) for name in TIMESERIES_COLUMNS}
    column["t"] = history.times
    column["Rmin"] = np.array([float(np.min(s.R)) for s in history.states])
    column["Rmax"] = np.array([float(np.max(s.R)) for s in history.states])
    column["pmin"] = np.array([float(np.min(s.p)) for s in history.states])
    column["pmax"] = np.array([float(np.max(s.p)) for s in history.states])
    column["p_bar"] = history.p_bars
    if history.H is not None:
        column["mass_error"] = np.array([history.mass(i) - 1.0 for i in range(n)])
    if history.certificate is not None:
        column["certificate"] = np.array(history.certificate)
    if report is not None:
        idx = report.weights.indices
        column["I"][idx] = report.I
        column["E"][idx] = report.E
        column["Q"][idx] = report.Q
        column["dQdt"][idx] = report.dQdt
        column["k_used"][idx] = report.weights.k
        column["cauchy_schwarz_gap"][idx] = report.cauchy_schwarz_gap
        if rate_check is not None:
            column["I_rate_residual"][idx] = rate_check.residual
    if eigen is not None:
        steps = np.searchsorted(history.times, eigen.times)
        column["lambda"][steps] = eigen.eigenvalues
        column["corrected_eigen"][steps] = eigen.corrected
    return [tuple(float(column[name][i]) for name in TIMESERIES_COLUMNS) for i in range(n)]


def write_timeseries(path: Path, rows: Iterable[tuple[float, ...]]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TIMESERIES_COLUMNS)
    count = 0
    for row in rows:
        writer.writerow([format_float(value) for value in row])
        count += 1
    atomic_write_text(path, buffer.getvalue())
    logger.info("Wrote %d rows to %s", count, path)


CONVERGENCE_COLUMNS = ("study", "parameter", "value", "error", "slope", "expected_order", "passed")


def write_convergence_table(path: Path, rows: Iterable[tuple]) -> None:
    """Slope table, one row per refinement level."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CONVERGENCE_COLUMNS)
    for study, parameter, value, error, slope, expected, passed in rows:
        writer.writerow([study, parameter, format_float(value), format_float(error), format_float(slope),
                         format_float(expected), "true" if passed else "false"])
    atomic_write_text(path, buffer.getvalue())
    logger.info("Wrote slope table to %s", path)


def jsonable(value: Any) -> Any:
    """Plain JSON values: arrays to lists, non-finite floats to null."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, Path):
        return str(value)
    return value


def write_report(path: Path, payload: dict[str, Any]) -> None:
    document = {"schema": SCHEMA_VERSION, "build": build_stamp(), **payload}
    atomic_write_text(path, json.dumps(jsonable(document), indent=2, allow_nan=False) + "\n")
    logger.info("Wrote report to %s", path)


def write_plots(path: Path, times_q: np.ndarray, Q: np.ndarray, I: np.ndarray,
                eigen: EigenMonotonicity | None = None, timestamps: bool = False) -> None:
    """Line charts of Q, I and lambda against t as a static SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = 3 if eigen is not None else 2
    with matplotlib.rc_context({"svg.hashsalt": "crf-lab", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(panels, 1, figsize=(7.0, 2.6 * panels), sharex=True)
        axes[0].plot(times_q, Q, color="tab:blue")
        axes[0].set_ylabel("Q")
        axes[1].semilogy(times_q, I, color="tab:green")
        axes[1].set_ylabel("I")
        if eigen is not None:
            axes[2].plot(eigen.times, eigen.eigenvalues, marker="o", color="tab:red", label="lambda")
            axes[2].plot(eigen.times, eigen.corrected, marker=".", color="tab:gray", label="corrected")
            axes[2].set_ylabel("lambda")
            axes[2].legend(loc="best")
        axes[-1].set_xlabel("t")
        fig.tight_layout()
        buffer = io.BytesIO()
        metadata = None if timestamps else {"Date": None}
        fig.savefig(buffer, format="svg", metadata=metadata)
        plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue())
    logger.info("Wrote plots to %s", path)
