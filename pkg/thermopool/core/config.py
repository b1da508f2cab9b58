"""Centralized configuration and constants."""
from __future__ import annotations
import os

from dotenv import load_dotenv

load_dotenv()


def _env_int(name: str, default: int) -> int:
	raw = os.getenv(name)
	return int(raw) if raw not in (None, "") else default


def _env_float(name: str, default: float) -> float:
	raw = os.getenv(name)
	return float(raw) if raw not in (None, "") else default


def _default_threads() -> int:
	env_choice = os.getenv("THERMOPOOL_THREADS")
	if env_choice:
		return max(1, int(env_choice))
	return os.cpu_count() or 1


THREADS = _default_threads()
LOG_LEVEL = os.getenv("THERMOPOOL_LOG_LEVEL", "INFO").upper()

# Bin scheme defaults (degrees Celsius)
BIN_LOWER = _env_float("THERMOPOOL_BIN_LOWER", -5.0)
BIN_UPPER = _env_float("THERMOPOOL_BIN_UPPER", 30.0)
BIN_WIDTH = _env_float("THERMOPOOL_BIN_WIDTH", 3.5)
REFERENCE_RANGE = (16.0, 23.0)
REFERENCE_FALLBACK = 19.5
ALL_WIDTHS = tuple(1.0 + 0.5 * i for i in range(9))
DAY_WINDOW = os.getenv("THERMOPOOL_DAY_WINDOW", "6:21")

# Replication (day-count) scheme: nine bins, reference [10, 15.5)
REPLICATION_LOWER = -12.0
REPLICATION_UPPER = 26.5
REPLICATION_WIDTH = 5.5
REPLICATION_REFERENCE = 12.75

TEMP_MIN = -90.0
TEMP_MAX = 60.0

# Sampler defaults
CHAINS = _env_int("THERMOPOOL_CHAINS", 4)
WARMUP = _env_int("THERMOPOOL_WARMUP", 1000)
SAMPLES = _env_int("THERMOPOOL_SAMPLES", 1000)
TARGET_ACCEPT = _env_float("THERMOPOOL_TARGET_ACCEPT", 0.8)
MAX_TREEDEPTH = _env_int("THERMOPOOL_MAX_TREEDEPTH", 10)
SEED = _env_int("THERMOPOOL_SEED", 42)
INIT_RADIUS = 2.0
MAX_DELTA_H = 1000.0

# Diagnostics thresholds
RHAT_THRESHOLD = 1.01
PARETO_K_THRESHOLD = 0.7
LKJ_ETA = 2.0
STUDENT_T_DF = 3.0

# Output
FLOAT_FORMAT = "%.17g"
MANIFEST_SUFFIX = ".manifest.json"
ROLLING_WINDOW_YEARS = 15
