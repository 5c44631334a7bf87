"""
Configuration module for the Nested Factorization demand engine.
Centralizes default thresholds, paths and constants used across the pipeline.
"""

import os
from pathlib import Path
from typing import Dict, List

# Project paths
PROJECT_ROOT = Path(__file__).parent.parent
LOGS_DIR = Path(os.getenv("NFD_LOGS_DIR", str(PROJECT_ROOT / "logs")))

# Default root for run artifacts (overridden by --out)
OUTPUT_ROOT = Path(os.getenv("NFD_OUTPUT_ROOT", str(PROJECT_ROOT / "runs")))

# Calendar conventions: weeks start on Monday, sessions are Tuesday and Wednesday
TUESDAY: int = 1
WEDNESDAY: int = 2
SESSION_WEEKDAYS: List[int] = [TUESDAY, WEDNESDAY]
WEEKDAY_NAMES: Dict[int, str] = {TUESDAY: "Tue", WEDNESDAY: "Wed"}

# Sample restriction
MIN_TRIPS: int = 20
MAX_TRIPS: int = 300

# Category filters
TOP_ITEMS: int = 10
MAX_MULTI_ITEM_SHARE: float = 0.15
MAX_MULTI_TOP_ITEM_SHARE: float = 0.10
MAX_PRICE_CORRELATION: float = 0.75
MIN_ITEMS_WITH_VARIATION: int = 2
MIN_PRICE_CHANGE: float = 0.10
MIN_PRICE_CHANGE_WEEK_SHARE: float = 0.10
SEASONALITY_DROP_FRACTION: float = 0.15

# Session grid
OUT_OF_STOCK_SHARE: float = 0.75
PRICE_CHANGE_TOLERANCE: float = 0.005

# Covariate encoding
AGE_BUCKETS: List[float] = [45.0, 55.0]  # Under 45, 45-55, Over 55
INCOME_SPLIT: float = 100_000.0
HOUSEHOLD_SIZE_CAP: int = 5

# Holdout
DEFAULT_VALIDATION_FRACTION: float = 0.1
DEFAULT_TEST_FRACTION: float = 0.1
PRICE_CHANGE_WEIGHT: float = 3.0

# Nested Factorization defaults
DEFAULT_K: int = 8
DEFAULT_M: int = 3
DEFAULT_WEEK_FACTORS: int = 2
INIT_SCALE: float = 0.1
CONVERGENCE_WINDOW: int = 5
CONVERGENCE_TOLERANCE: float = 1e-5

# HPF defaults
HPF_K: int = 20
HPF_SHAPE: float = 0.3
HPF_ACTIVITY_SHAPE: float = 0.3
HPF_ACTIVITY_RATE: float = 0.3
HPF_TOLERANCE: float = 1e-8

# Logit baselines
MIXED_LOGIT_DRAWS: int = 500
MIN_MIXED_LOGIT_DRAWS: int = 100
RIDGE_PENALTY: float = 1e-3
GRADIENT_TOLERANCE: float = 1e-6

# Evaluation
PROBABILITY_FLOOR: float = 1e-12
SKELLAM_LAMBDA_FLOOR: float = 1e-8
POPULAR_DAILY_PURCHASES: float = 2.5
BOOTSTRAP_REPLICATES: int = 1000
ELASTICITY_STEP: float = 0.01
PLACEBO_ALPHA: float = 0.01
MIN_ELIGIBLE_HOUSEHOLDS: int = 10
MIN_TERCILE_SHOPPERS: int = 5

# Targeting
COUPON_DISCOUNT: float = 0.30
COUPON_BUDGET: float = 0.30
MIN_CELL_SIZE: int = 5
BEHAVIORAL_BINS: int = 5

# Logging settings
LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE: Path = LOGS_DIR / "nfdemand.log"

# Checkpoint layout version
CHECKPOINT_VERSION: int = 1
