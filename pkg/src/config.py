import os
from pathlib import Path

from dotenv import load_dotenv

# Load .env from project root
_project_root = Path(__file__).resolve().parent.parent
load_dotenv(_project_root / ".env")

# Model constants: the manifold has dimension n = m + 1 = 3
M = 2
DIM = M + 1

# Pointwise positive-definiteness floor for metric eigenvalues
EPS_PD = 1e-10

# Accepted pressure solves must satisfy min p >= PRESSURE_FLOOR
PRESSURE_FLOOR = -1e-8

# I(t) below this is treated as vanished (backward-uniqueness regime)
VANISHING_THRESHOLD = 1e-300

# Heat and conjugate-heat passes abort once |v| or H exceeds this
BLOWUP_LIMIT = 1e12

LOG_LEVEL = os.environ.get("CRFLAB_LOG_LEVEL", "INFO")

# Default derivative stencil order (2 or 4) and time-step safety factor
FD_ORDER = int(os.environ.get("CRFLAB_FD_ORDER", "4"))
SAFETY = float(os.environ.get("CRFLAB_SAFETY", "0.25"))

# Bundled scenario files, addressable by name from the CLI
SCENARIO_DIR = Path(os.environ.get("CRFLAB_SCENARIO_DIR", str(_project_root / "scenarios")))

# Directory for time series, reports and plots
OUTPUT_DIR = Path(os.environ.get("CRFLAB_OUTPUT_DIR", str(_project_root / "output")))
