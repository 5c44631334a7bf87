"""
Placebo price-shift tests of price exogeneity.

Each week with a Tuesday-to-Wednesday price change is moved to a week that
had no change, and the MNL price coefficient is re-estimated. If prices
responded to anticipated demand, the shifted prices would still look
significant; under exogeneity the p-values are roughly uniform.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from src.config import PLACEBO_ALPHA, PRICE_CHANGE_TOLERANCE
from src.data.dataset import ChoiceDataset
from src.data.schemas import LogitConfig, LogitSpec, PlaceboReport, PlaceboResult
from src.models.logit import LogitInputs, build_category_data, fit_mnl
from src.utils.errors import DataError, NfdError
from src.utils.logger import get_logger

logger = get_logger(__name__)

MODES = ("forward", "backward")
SCOPES = ("single", "all")
PLACEBO_SPEC = LogitSpec(name="mnl_placebo", variant="mnl", controls="demographics")


def _next_free(candidates: List[int], used: set, start: int, step: int, n_weeks: int) -> Optional[int]:
    week = start + step
    while 0 <= week < n_weeks:
        if week in candidates and week not in used:
            return week
        week += step
    return None


def placebo_shift(
    price: np.ndarray,
    mode: str,
    tolerance: float = PRICE_CHANGE_TOLERANCE,
    available: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, Dict[int, int]]:
    """
    Relocate every price-change week of one item to a change-free week.

    Change weeks are visited in the direction of ``mode``; each goes to the
    first unused change-free week in that direction, else the nearest unused
    one in the opposite direction. The source week gets its Tuesday price on
    Wednesday and the target week gets the source's relative change.

    Args:
        price: Session prices [T, 2] (NaN where unavailable)
        mode: 'forward' (later weeks) or 'backward' (earlier weeks)
        tolerance: Differences up to this are not changes
        available: Availability [T, 2] (defaults to finite prices)

    Returns:
        Tuple of (shifted prices [T, 2], map from source week to target week)

    Raises:
        ValueError: On an unknown mode
        DataError: If a change week has no free week left
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got '{mode}'")
    price = np.asarray(price, dtype=float)
    available = np.isfinite(price) if available is None else np.asarray(available, dtype=bool)
    both = available.all(axis=1)
    with np.errstate(invalid="ignore"):
        delta = np.where(both, np.abs(price[:, 1] - price[:, 0]), 0.0)
    changes = [int(t) for t in np.flatnonzero(both & (delta > tolerance))]
    free = [int(t) for t in np.flatnonzero(both & (delta <= tolerance))]

    step = 1 if mode == "forward" else -1
    shifted = price.copy()
    relocation: Dict[int, int] = {}
    used: set = set()
    n_weeks = price.shape[0]
    for source in (changes if step == 1 else changes[::-1]):
        target = _next_free(free, used, source, step, n_weeks)
        if target is None:
            target = _next_free(free, used, source, -step, n_weeks)
        if target is None:
            raise DataError(f"No change-free week left for the price change in week {source}")
        used.add(target)
        relocation[source] = target
        ratio = price[source, 1] / price[source, 0]
        shifted[source, 1] = price[source, 0]
        shifted[target, 1] = price[target, 0] * ratio
    return shifted, dict(sorted(relocation.items()))


def shifted_log_prices(
    dataset: ChoiceDataset,
    category: int,
    mode: str,
    scope: str,
    tolerance: float = PRICE_CHANGE_TOLERANCE
) -> Tuple[np.ndarray, int]:
    """Item log prices [J, T, 2] with the scope's items shifted, and the number of relocated weeks."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got '{scope}'")
    items = [dataset.top_item(category)] if scope == "single" else list(dataset.category_items(category))
    price = dataset.price.copy()
    relocated = 0
    for j in items:
        price[j], moved = placebo_shift(dataset.price[j], mode, tolerance, dataset.available[j])
        relocated += len(moved)
    with np.errstate(invalid="ignore", divide="ignore"):
        log_price = np.where(dataset.available, np.log(price), 0.0)
    return log_price, relocated


def placebo_fit(
    dataset: ChoiceDataset,
    category: int,
    mode: str,
    scope: str,
    spec: LogitSpec = PLACEBO_SPEC,
    config: Optional[LogitConfig] = None,
    inputs: Optional[LogitInputs] = None,
    label: str = "train",
    tolerance: float = PRICE_CHANGE_TOLERANCE
) -> PlaceboResult:
    """
    Refit the MNL on shifted prices and report the placebo price coefficient.

    The single-item scope gives the shifted item its own price coefficient.
    Fit failures are recorded on the result rather than raised.
    """
    name = dataset.categories[category]
    try:
        log_price, relocated = shifted_log_prices(dataset, category, mode, scope, tolerance)
        data = build_category_data(dataset, category, label, inputs, log_price_override=log_price)
        coefficient = "eta"
        if scope == "single":
            data = data.with_focal(dataset.layouts[category].alternative_of(dataset.top_item(category)))
            coefficient = "eta_focal"
        fit = fit_mnl(data, spec, config)
        estimate, se, p_value = fit.coefficient(coefficient)
    except (NfdError, ValueError, np.linalg.LinAlgError) as e:
        logger.warning(f"Placebo {mode}/{scope} failed for category {name}: {e}")
        return PlaceboResult(category=name, mode=mode, scope=scope, failed=True, error=str(e))
    finite = np.isfinite(p_value)
    return PlaceboResult(
        category=name,
        mode=mode,
        scope=scope,
        coefficient=estimate,
        standard_error=float(se) if np.isfinite(se) else None,
        p_value=float(np.clip(p_value, 0.0, 1.0)) if finite else None,
        failed=not finite,
        error=None if finite else "price coefficient not identified",
        relocated_weeks=relocated,
    )


def run_placebo_suite(
    dataset: ChoiceDataset,
    modes: Sequence[str] = MODES,
    scopes: Sequence[str] = SCOPES,
    spec: LogitSpec = PLACEBO_SPEC,
    config: Optional[LogitConfig] = None,
    alpha: float = PLACEBO_ALPHA,
    n_jobs: int = 1,
    categories: Optional[Sequence[int]] = None,
    label: str = "train"
) -> PlaceboReport:
    """
    Placebo refits for every category, mode and scope.

    Returns:
        PlaceboReport with, per 'mode/scope', the number of successful fits
        and the number significant at ``alpha``
    """
    categories = list(range(dataset.n_categories)) if categories is None else list(categories)
    inputs = LogitInputs.from_dataset(dataset)
    tasks = [(c, mode, scope) for c in categories for mode in modes for scope in scopes]
    results: List[PlaceboResult] = Parallel(n_jobs=n_jobs)(
        delayed(placebo_fit)(dataset, c, mode, scope, spec, config, inputs, label)
        for c, mode, scope in tasks
    )

    failures: Dict[str, int] = {}
    fitted: Dict[str, int] = {}
    for r in results:
        key = f"{r.mode}/{r.scope}"
        failures.setdefault(key, 0)
        fitted.setdefault(key, 0)
        if r.failed:
            continue
        fitted[key] += 1
        failures[key] += int(r.p_value < alpha)
    report = PlaceboReport(alpha=alpha, results=results, failures=failures, fitted=fitted)
    for key in sorted(fitted):
        rate = report.failure_rate(*key.split("/"))
        logger.info(
            f"Placebo {key}: {failures[key]} of {fitted[key]} categories significant at {alpha}"
            + (f" ({100 * rate:.1f}%)" if rate is not None else "")
        )
    return report
