"""
Configuration and report schemas using Pydantic.
Ensures type safety and validation for run configs and JSON summaries.
"""

import json
from datetime import date
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from src import config as C
from src.utils.errors import ConfigError


class SampleConfig(BaseModel):
    """Household and calendar restrictions of the working sample."""

    min_trips: int = Field(C.MIN_TRIPS, ge=1, description="Minimum shopping trips per household, all weekdays")
    max_trips: int = Field(C.MAX_TRIPS, ge=1, description="Maximum shopping trips per household, all weekdays")
    holiday_dates: List[date] = Field(
        default_factory=list,
        description="Holidays; the week containing the day before each holiday is excluded"
    )
    excluded_weeks: List[int] = Field(default_factory=list, description="Explicit week indices to drop")

    @model_validator(mode="after")
    def validate_band(self) -> "SampleConfig":
        """Validate the trip band is ordered."""
        if self.min_trips > self.max_trips:
            raise ValueError(
                f"min_trips ({self.min_trips}) must not exceed max_trips ({self.max_trips})"
            )
        return self


class FilterConfig(BaseModel):
    """Category filter thresholds."""

    top_items: int = Field(C.TOP_ITEMS, ge=1)
    max_multi_item_share: float = Field(C.MAX_MULTI_ITEM_SHARE, ge=0.0, le=1.0)
    max_multi_top_item_share: float = Field(C.MAX_MULTI_TOP_ITEM_SHARE, ge=0.0, le=1.0)
    max_price_correlation: float = Field(C.MAX_PRICE_CORRELATION, ge=0.0, le=1.0)
    min_items_with_variation: int = Field(C.MIN_ITEMS_WITH_VARIATION, ge=0)
    min_price_change: float = Field(C.MIN_PRICE_CHANGE, ge=0.0)
    min_price_change_week_share: float = Field(C.MIN_PRICE_CHANGE_WEEK_SHARE, ge=0.0, le=1.0)
    seasonality_drop_fraction: float = Field(C.SEASONALITY_DROP_FRACTION, ge=0.0, lt=1.0)


class CovariateConfig(BaseModel):
    """Household demographic bucketing (one-hot, first level dropped)."""

    age_buckets: List[float] = Field(default_factory=lambda: list(C.AGE_BUCKETS))
    income_split: float = Field(C.INCOME_SPLIT, gt=0)
    household_size_cap: int = Field(C.HOUSEHOLD_SIZE_CAP, ge=1)

    @field_validator("age_buckets")
    @classmethod
    def validate_age_buckets(cls, v: List[float]) -> List[float]:
        """Validate bucket boundaries are strictly increasing."""
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"age_buckets must be strictly increasing, got {v}")
        return v


class GridConfig(BaseModel):
    """Session grid construction."""

    out_of_stock_share: float = Field(C.OUT_OF_STOCK_SHARE, ge=0.0, le=1.0)
    price_change_tolerance: float = Field(C.PRICE_CHANGE_TOLERANCE, ge=0.0)


class SplitConfig(BaseModel):
    """Household-week holdout scheme."""

    scheme: str = Field("household-week", description="Holdout scheme tag")
    validation_fraction: float = Field(C.DEFAULT_VALIDATION_FRACTION, ge=0.0, lt=1.0)
    test_fraction: float = Field(C.DEFAULT_TEST_FRACTION, ge=0.0, lt=1.0)
    price_change_weight: float = Field(
        C.PRICE_CHANGE_WEIGHT,
        ge=1.0,
        description="Relative sampling weight of price-change weeks in the validation draw"
    )

    @model_validator(mode="after")
    def validate_fractions(self) -> "SplitConfig":
        """Validate that a training share remains."""
        if self.validation_fraction + self.test_fraction >= 1.0:
            raise ValueError(
                "validation_fraction + test_fraction must be < 1, got "
                f"{self.validation_fraction + self.test_fraction}"
            )
        return self


class TrainingConfig(BaseModel):
    """Stochastic variational inference settings for Nested Factorization."""

    K: int = Field(C.DEFAULT_K, ge=1, description="Intercept factor count")
    M: int = Field(C.DEFAULT_M, ge=1, description="Sensitivity factor count")
    week_factors: int = Field(C.DEFAULT_WEEK_FACTORS, ge=1)
    prior_scale: float = Field(1.0, gt=0)
    init_scale: float = Field(C.INIT_SCALE, gt=0)
    batch_size: int = Field(512, ge=1)
    draws: int = Field(1, ge=1, description="Monte Carlo draws per gradient")
    learning_rate: float = Field(0.05, gt=0)
    lr_decay: float = Field(0.0, ge=0, description="Step size = lr / (1 + decay * iteration)")
    max_epochs: int = Field(30, ge=1)
    tolerance: float = Field(C.CONVERGENCE_TOLERANCE, gt=0)
    eval_every: int = Field(50, ge=1, description="Iterations between ELBO evaluations")
    window: int = Field(C.CONVERGENCE_WINDOW, ge=2)
    monitor_size: int = Field(2000, ge=1, description="Fixed ELBO monitoring subsample size")
    seed: int = 0
    grid: List[Tuple[int, int]] = Field(
        default_factory=list,
        description="(K, M) candidates chosen by validation own-price event likelihood; replaces K and M when set"
    )

    @field_validator("grid")
    @classmethod
    def validate_grid(cls, v: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
        """Validate candidate factor counts are positive and distinct."""
        if any(k < 1 or m < 1 for k, m in v):
            raise ValueError(f"grid factor counts must be >= 1, got {v}")
        if len(set(v)) != len(v):
            raise ValueError(f"grid candidates must be distinct, got {v}")
        return v

    def candidates(self) -> List["TrainingConfig"]:
        """One single-candidate config per grid entry."""
        return [self.model_copy(update={"K": k, "M": m, "grid": []}) for k, m in self.grid]


class HpfConfig(BaseModel):
    """Hierarchical Poisson factorization settings."""

    k: int = Field(C.HPF_K, ge=1)
    shape: float = Field(C.HPF_SHAPE, gt=0)
    activity_shape: float = Field(C.HPF_ACTIVITY_SHAPE, gt=0)
    activity_rate: float = Field(C.HPF_ACTIVITY_RATE, gt=0)
    max_iter: int = Field(500, ge=1)
    tolerance: float = Field(C.HPF_TOLERANCE, gt=0)
    seed: int = 0


class LogitSpec(BaseModel):
    """One baseline logit specification."""

    name: str
    variant: Literal["mnl", "nested", "mixed"] = "mnl"
    controls: Literal["demographics", "hpf", "none"] = "demographics"
    random_price: bool = False
    random_intercept: bool = False
    fix_mixing_scale: Optional[float] = Field(
        None, ge=0.0, description="Pin all mixing standard deviations to this value"
    )
    week_effects: bool = True
    weekday: bool = True
    draws: int = Field(C.MIXED_LOGIT_DRAWS, ge=1)
    fixed_nesting: Optional[float] = Field(None, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def validate_variant(self) -> "LogitSpec":
        """Validate variant-specific options."""
        if self.variant == "mixed":
            if not (self.random_price or self.random_intercept):
                raise ValueError("mixed logit needs random_price or random_intercept")
            if self.draws < C.MIN_MIXED_LOGIT_DRAWS:
                raise ValueError(f"mixed logit needs draws >= {C.MIN_MIXED_LOGIT_DRAWS}")
        elif self.random_price or self.random_intercept:
            raise ValueError(f"random coefficients are only valid for mixed logit, not {self.variant}")
        if self.fixed_nesting is not None and self.variant != "nested":
            raise ValueError("fixed_nesting is only valid for nested logit")
        return self


def default_logit_ladder() -> List[LogitSpec]:
    """Baseline ladder compared against Nested Factorization."""
    return [
        LogitSpec(name="mnl_demo", variant="mnl", controls="demographics"),
        LogitSpec(name="mnl_hpf", variant="mnl", controls="hpf"),
        LogitSpec(name="nested_demo", variant="nested", controls="demographics"),
        LogitSpec(name="nested_hpf", variant="nested", controls="hpf"),
        LogitSpec(name="mixed_price_demo", variant="mixed", controls="demographics", random_price=True),
        LogitSpec(name="mixed_price_hpf", variant="mixed", controls="hpf", random_price=True),
        LogitSpec(
            name="mixed_intercept_price", variant="mixed", controls="none",
            random_price=True, random_intercept=True
        ),
    ]


class LogitConfig(BaseModel):
    """Baseline estimation settings."""

    specs: List[LogitSpec] = Field(default_factory=default_logit_ladder)
    max_iter: int = Field(500, ge=1)
    ridge: float = Field(C.RIDGE_PENALTY, ge=0.0)
    gradient_tolerance: float = Field(C.GRADIENT_TOLERANCE, gt=0)


class EvaluationConfig(BaseModel):
    """Measurement settings."""

    popular_daily_purchases: float = Field(C.POPULAR_DAILY_PURCHASES, gt=0)
    bootstrap_replicates: int = Field(C.BOOTSTRAP_REPLICATES, ge=1)
    elasticity_step: float = Field(C.ELASTICITY_STEP, gt=0, lt=0.5)
    elasticity_households: int = Field(200, ge=1)
    elasticity_sessions: int = Field(4, ge=1)
    placebo_alpha: float = Field(C.PLACEBO_ALPHA, gt=0, lt=1)
    min_eligible_households: int = Field(C.MIN_ELIGIBLE_HOUSEHOLDS, ge=10)
    min_tercile_shoppers: int = Field(C.MIN_TERCILE_SHOPPERS, ge=1)
    price_change_bins: List[float] = Field(
        default_factory=lambda: [-0.3, -0.1, 0.0, 0.1, 0.3],
        description="Inner edges of log price-change buckets"
    )
    plots: bool = False


class TargetingConfig(BaseModel):
    """Coupon and personalized pricing simulation settings."""

    discount: float = Field(C.COUPON_DISCOUNT, gt=0.0, lt=1.0)
    budget: float = Field(C.COUPON_BUDGET, gt=0.0, lt=1.0)
    min_cell_size: int = Field(C.MIN_CELL_SIZE, ge=1)
    behavioral_bins: int = Field(C.BEHAVIORAL_BINS, ge=1)


class SyntheticConfig(BaseModel):
    """Ground-truth generator settings."""

    n_households: int = Field(500, ge=1)
    n_categories: int = Field(20, ge=1)
    items_per_category: int = Field(8, ge=1)
    n_weeks: int = Field(80, ge=1)
    K: int = Field(3, ge=1)
    M: int = Field(2, ge=1)
    week_factors: int = Field(2, ge=1)
    item_covariates: int = Field(2, ge=0)
    classes_per_category: int = Field(2, ge=1)
    subclasses_per_class: int = Field(2, ge=1)
    class_spread: float = Field(0.3, ge=0.0, description="Item factor noise around class centers")
    factor_scale: float = Field(0.8, ge=0.0)
    iv_coefficient: float = Field(0.7, description="Common IV loading of the category stage")
    price_sensitivity: float = Field(2.0, ge=0.0, description="Mean log-price coefficient scale")
    sensitivity_spread: float = Field(0.5, ge=0.0)
    category_intercept: float = Field(-3.0, description="Baseline category purchase log-odds")
    visit_prob: float = Field(0.3, gt=0.0, le=1.0)
    price_change_prob: float = Field(0.25, ge=0.0, le=1.0)
    discount_range: Tuple[float, float] = (0.6, 0.9)
    base_price_range: Tuple[float, float] = (1.0, 5.0)
    stockout_prob: float = Field(0.02, ge=0.0, le=1.0)
    cost_fraction: float = Field(0.6, gt=0.0, lt=1.0)
    missing_cost_share: float = Field(0.2, ge=0.0, le=1.0)
    endogeneity: bool = False
    endogeneity_bump: float = Field(0.5, ge=0.0)
    demand_shock_scale: float = Field(0.6, ge=0.0)
    start_date: date = date(2005, 5, 2)


class RunConfig(BaseModel):
    """Top-level declarative run configuration."""

    transactions: Optional[Path] = None
    hierarchy: Optional[Path] = None
    households: Optional[Path] = None
    separator: str = ","
    seed: int = 0
    log_level: str = "INFO"
    sample: SampleConfig = Field(default_factory=SampleConfig)
    filters: FilterConfig = Field(default_factory=FilterConfig)
    covariates: CovariateConfig = Field(default_factory=CovariateConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    nf: TrainingConfig = Field(default_factory=TrainingConfig)
    hpf: HpfConfig = Field(default_factory=HpfConfig)
    logit: LogitConfig = Field(default_factory=LogitConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    targeting: TargetingConfig = Field(default_factory=TargetingConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate the log level name."""
        valid = ["DEBUG", "INFO", "WARNING", "ERROR"]
        if v.upper() not in valid:
            raise ValueError(f"log_level must be one of {valid}, got '{v}'")
        return v.upper()


def format_validation_error(error: ValidationError) -> str:
    """Render pydantic errors as 'field.path: message' lines."""
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{path}: {item['msg']}")
    return "; ".join(lines)


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict] = None) -> RunConfig:
    """
    Load and validate a JSON run configuration.

    Args:
        path: JSON file (``None`` means all defaults)
        overrides: Top-level keys applied on top of the file

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: On unreadable JSON or schema violations (with field paths)
    """
    raw: Dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    raw.update(overrides or {})
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {format_validation_error(e)}") from e


class FilterDecision(BaseModel):
    """Per-category outcome of the sample filters."""

    category: str
    kept: bool
    reasons: List[str] = Field(default_factory=list)
    statistics: Dict[str, Optional[float]] = Field(default_factory=dict)


class FitReport(BaseModel):
    """Predictive fit normalized by the number of purchases."""

    mean_log_likelihood: float
    mean_squared_error: float
    n_purchases: int
    n_cells: int
    n_clipped: int = 0


class EventTypeReport(BaseModel):
    """Counterfactual-event likelihoods for one event type."""

    event_type: str
    n_events: int
    n_skipped: int
    individual_mean_ll: Optional[float] = None
    individual_se: Optional[float] = None
    aggregate_mean_ll: Optional[float] = None
    aggregate_se: Optional[float] = None
    n_skellam: int = 0
    n_bernoulli: int = 0


class EventReport(BaseModel):
    """Counterfactual-event likelihoods for one model."""

    model: str
    by_type: Dict[str, EventTypeReport]


class Manifest(BaseModel):
    """Provenance record written next to every run's outputs."""

    command: str
    config_hash: str
    seed: int
    versions: Dict[str, str]
    outputs: List[str] = Field(default_factory=list)


class PersonalizationReport(BaseModel):
    """Spread and calibration of household-level predicted purchase rates."""

    level: Literal["upc", "category"]
    coefficient_of_variation: float
    slope: Optional[float] = None
    slope_defined: bool = True
    n_columns: int
    n_households: int


class PlaceboResult(BaseModel):
    """Price coefficient of one placebo refit."""

    category: str
    mode: Literal["forward", "backward"]
    scope: Literal["single", "all"]
    coefficient: Optional[float] = None
    standard_error: Optional[float] = None
    p_value: Optional[float] = Field(None, ge=0.0, le=1.0)
    failed: bool = False
    error: Optional[str] = None
    relocated_weeks: int = 0


class PlaceboReport(BaseModel):
    """Placebo suite results with failure counts at the configured level."""

    alpha: float
    results: List[PlaceboResult]
    failures: Dict[str, int] = Field(default_factory=dict)
    fitted: Dict[str, int] = Field(default_factory=dict)

    def failure_rate(self, mode: str, scope: str) -> Optional[float]:
        key = f"{mode}/{scope}"
        n = self.fitted.get(key, 0)
        return self.failures.get(key, 0) / n if n else None


class ElasticitySummary(BaseModel):
    """Own and cross price elasticities summarized over products."""

    model: str
    median_own: Optional[float] = None
    sd_of_means: Optional[float] = None
    mean_of_sds: Optional[float] = None
    cross_same_class: Optional[float] = None
    cross_other_class: Optional[float] = None
    class_pct_difference: Optional[float] = None
    cross_same_subclass: Optional[float] = None
    cross_other_subclass: Optional[float] = None
    subclass_pct_difference: Optional[float] = None
    n_products: int = 0
    n_households: int = 0
    n_undefined: int = 0


class TargetingScenario(BaseModel):
    """One coupon targeting simulation."""

    category: int = Field(..., ge=0)
    upc: Optional[str] = Field(None, description="Focal UPC (default: the category's training leader)")
    discount: float = Field(C.COUPON_DISCOUNT, gt=0.0, lt=1.0)
    budget: float = Field(C.COUPON_BUDGET, gt=0.0, lt=1.0)
    regimes: List[Literal["individualized", "demographic", "behavioral", "uniform"]] = Field(
        default_factory=lambda: ["individualized", "demographic", "behavioral", "uniform"]
    )


class RegimeGain(BaseModel):
    """Expected profit gain of one targeting regime under the truth model."""

    regime: str
    expected_gain: float
    pct_vs_uniform: Optional[float] = None
    n_cells: int = 0
    n_merged: int = 0


class CouponReport(BaseModel):
    """Coupon targeting gains for one scenario."""

    category: str
    upc: str
    candidate: str
    discount: float
    budget: float
    n_households: int
    n_selected: int
    uniform_gain: float
    regimes: Dict[str, RegimeGain]


class PriceGroupResult(BaseModel):
    """Households assigned to one of the two candidate prices."""

    price: float
    n_households: int
    targeted_profit: Optional[float] = None
    alternative_profit: Optional[float] = None
    pct_gain: Optional[float] = None
    n_targeted_trips: int = 0
    n_alternative_trips: int = 0


class TwoPriceReport(BaseModel):
    """Personalized two-price assignment evaluated on held-out trips."""

    upc: str
    model: str
    cost: float
    prices: List[float]
    preferred_price: float
    preferred_fraction: float
    groups: List[PriceGroupResult]
    targeted_profit: Optional[float] = None
    alternative_profit: Optional[float] = None
    pct_gain: Optional[float] = None
