"""Guardrails for field inputs and artifact output safety."""

import logging
import os
import tempfile
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


def require_finite(name: str, values: np.ndarray) -> None:
    """Reject arrays carrying NaN or infinity."""
    if not np.all(np.isfinite(values)):
        bad = int(np.count_nonzero(~np.isfinite(values)))
        raise ValueError(f"{name} contains {bad} non-finite value(s)")


def require_positive(name: str, values: np.ndarray) -> None:
    """Reject fields that are not strictly positive at every node."""
    require_finite(name, values)
    smallest = float(np.min(values))
    if smallest <= 0.0:
        raise ValueError(f"{name} must be strictly positive (min {smallest:.3e})")


def require_constant_sign(name: str, values: np.ndarray) -> int:
    """Return the common sign of `values`, rejecting zeros and sign changes."""
    require_finite(name, values)
    if np.all(values > 0.0):
        return 1
    if np.all(values < 0.0):
        return -1
    raise ValueError(f"{name} vanishes or changes sign on the window")


def relative_residual(lhs: np.ndarray, rhs: np.ndarray, floor: float = 0.0) -> float:
    """Max-norm mismatch of two sides of an identity, relative to the larger side.

    Both sides vanishing counts as exact agreement. `floor` keeps round-off
    noise on a side that is zero in exact arithmetic from being amplified.
    """
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    mismatch = float(np.max(np.abs(lhs - rhs)))
    scale = max(float(np.max(np.abs(lhs))), float(np.max(np.abs(rhs))), floor)
    if scale == 0.0:
        return 0.0
    return mismatch / scale


def format_float(value: float) -> str:
    """17 significant digits, enough to round-trip a double."""
    return f"{value:.17g}"


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug("Wrote %d bytes to %s", len(data), path)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
