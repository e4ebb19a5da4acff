from __future__ import annotations

import os
from pathlib import Path

try:
    import psutil
except ModuleNotFoundError:
    psutil = None

REPO_ROOT = Path(__file__).resolve().parents[2]

OUTPUT_DIR = Path(os.getenv("PACDRGP_OUTPUT_DIR") or "runs")
DATASET_PATH = Path(os.getenv("PACDRGP_DATASET") or REPO_ROOT / "data" / "synthetic_actuator_512.csv")
TAU = float(os.getenv("PACDRGP_TAU") or "0.5")
N_MAX = int(os.getenv("PACDRGP_N_MAX") or "50000")
GRID_POINTS = int(os.getenv("PACDRGP_GRID_POINTS") or "60")
SEED = int(os.getenv("PACDRGP_SEED") or "0")
LOG_LEVEL = (os.getenv("PACDRGP_LOG_LEVEL") or "INFO").upper()
if psutil is not None:
    _cpu_count = psutil.cpu_count(logical=True)
else:
    _cpu_count = os.cpu_count()
_workers_override = os.getenv("PACDRGP_WORKERS", "")
if _workers_override.strip():
    BOUND_WORKERS = max(int(_workers_override), 1)
else:
    BOUND_WORKERS = _cpu_count if _cpu_count and _cpu_count > 0 else 1
