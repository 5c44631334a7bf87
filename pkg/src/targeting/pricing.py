"""
Expected profit and personalized two-price assignment.

Profit per trip is purchase probability times margin (price minus marginal
cost). Prices below marginal cost are never candidates.
"""

from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from src.config import PRICE_CHANGE_TOLERANCE
from src.data.dataset import ChoiceDataset
from src.data.schemas import PriceGroupResult, TwoPriceReport
from src.models.base import DemandModel, focal_probabilities
from src.utils.errors import DataError
from src.utils.logger import get_logger

logger = get_logger(__name__)

FRACTION_BUCKET = 0.05


def profit(probability, price: float, cost: float):
    """
    Expected profit of a sale opportunity.

    Raises:
        ValueError: If the price is below marginal cost
    """
    if price < cost:
        raise ValueError(f"Price {price:.2f} is below marginal cost {cost:.2f}")
    return np.asarray(probability, dtype=float) * (price - cost)


def _override_prices(
    dataset: ChoiceDataset, item: int, weeks: np.ndarray, days: np.ndarray, price: float
) -> Tuple[np.ndarray, np.ndarray]:
    category = int(dataset.item_category[item])
    lp, av = dataset.session_prices(category, weeks, days)
    pos = np.flatnonzero(dataset.category_items(category) == item)[0]
    lp = lp.copy()
    lp[:, pos] = np.log(price)
    return lp, av


def expected_profits(
    model: DemandModel,
    dataset: ChoiceDataset,
    item: int,
    price: float,
    households: np.ndarray,
    weeks: np.ndarray,
    days: np.ndarray,
    cost: Optional[float] = None
) -> np.ndarray:
    """Expected profit per trip [n] of ``item`` at ``price``; other items keep their session prices."""
    cost = float(dataset.cost[item]) if cost is None else cost
    if price < cost:
        raise ValueError(f"Price {price:.2f} is below marginal cost {cost:.2f}")
    weeks, days = np.asarray(weeks, dtype=int), np.asarray(days, dtype=int)
    lp, av = _override_prices(dataset, item, weeks, days, price)
    probs = focal_probabilities(
        model, int(dataset.item_category[item]), item, np.asarray(households, dtype=int), weeks, days, lp, av
    )
    return profit(probs, price, cost)


def expected_profit(
    model: DemandModel,
    dataset: ChoiceDataset,
    household: int,
    item: int,
    price: float,
    cost: Optional[float] = None,
    week: int = 0,
    day: int = 0
) -> float:
    """Expected profit of one household's trip at one session."""
    return float(expected_profits(model, dataset, item, price, [household], [week], [day], cost)[0])


def candidate_prices(
    dataset: ChoiceDataset, item: int, n_prices: int = 2, tolerance: float = PRICE_CHANGE_TOLERANCE
) -> List[float]:
    """
    The most common session prices of an item at or above marginal cost.

    Ties in frequency go to the lower price.

    Raises:
        DataError: If fewer than ``n_prices`` distinct prices qualify
    """
    prices = dataset.price[item][dataset.available[item]]
    prices = np.round(prices, 2)
    prices = prices[prices >= dataset.cost[item]]
    values, counts = np.unique(prices, return_counts=True)
    order = np.lexsort((values, -counts))[:n_prices]
    if len(order) < n_prices:
        raise DataError(
            f"Item {dataset.upcs[item]} has {len(values)} distinct prices above cost; {n_prices} needed"
        )
    return sorted(float(values[k]) for k in order)


def _mean_or_none(values: np.ndarray) -> Optional[float]:
    return float(values.mean()) if values.size else None


def _pct(targeted: Optional[float], alternative: Optional[float]) -> Optional[float]:
    if targeted is None or alternative is None or alternative == 0:
        return None
    return 100.0 * (targeted - alternative) / abs(alternative)


def two_price_assignment(
    model: DemandModel,
    dataset: ChoiceDataset,
    item: int,
    label: str = "test",
    prices: Optional[List[float]] = None,
    tolerance: float = PRICE_CHANGE_TOLERANCE
) -> Tuple[TwoPriceReport, pd.DataFrame]:
    """
    Assign each household the more profitable of two prices and evaluate on held-out trips.

    Households are assigned by mean expected profit over their trips in the
    split where the item is available. Evaluation compares realized profit
    per trip on trips whose session price equals the household's assigned
    price against trips at the other price.

    Returns:
        Tuple of (report, per-household assignment table)

    Raises:
        DataError: If fewer than two prices at or above cost were observed
    """
    category = int(dataset.item_category[item])
    cost = float(dataset.cost[item])
    prices = candidate_prices(dataset, item, tolerance=tolerance) if prices is None else sorted(prices)
    if len(prices) != 2:
        raise ValueError(f"Two candidate prices are needed, got {len(prices)}")
    if any(p < cost for p in prices):
        raise ValueError("Candidate prices must not be below marginal cost")

    trips = np.flatnonzero(dataset.split_mask(label) & dataset.valid[:, category])
    trips = trips[dataset.available[item, dataset.trip_week[trips], dataset.trip_day[trips]]]
    hh, wk, dy = dataset.trip_household[trips], dataset.trip_week[trips], dataset.trip_day[trips]

    n_trips = np.bincount(hh, minlength=dataset.n_households).astype(float)
    mean_profit = np.zeros((dataset.n_households, len(prices)))
    for k, price in enumerate(prices):
        np.add.at(mean_profit[:, k], hh, expected_profits(model, dataset, item, price, hh, wk, dy, cost))
    shoppers = np.flatnonzero(n_trips > 0)
    mean_profit[shoppers] /= n_trips[shoppers, None]
    assigned = np.argmax(mean_profit, axis=1)
    preferred = int(np.argmax(mean_profit[shoppers].sum(axis=0))) if shoppers.size else 0

    session_price = dataset.price[item, wk, dy]
    at_price = np.column_stack([np.abs(session_price - p) <= tolerance for p in prices])
    realized = (dataset.choices[trips, category] == item) * (session_price - cost)
    trip_assigned = assigned[hh]

    groups = []
    for k, price in enumerate(prices):
        in_group = trip_assigned == k
        targeted = realized[in_group & at_price[:, k]]
        alternative = realized[in_group & at_price[:, 1 - k]]
        groups.append(PriceGroupResult(
            price=price,
            n_households=int(np.sum(assigned[shoppers] == k)),
            targeted_profit=_mean_or_none(targeted),
            alternative_profit=_mean_or_none(alternative),
            pct_gain=_pct(_mean_or_none(targeted), _mean_or_none(alternative)),
            n_targeted_trips=int(targeted.size),
            n_alternative_trips=int(alternative.size),
        ))
    targeted_all = realized[at_price[np.arange(len(trips)), trip_assigned]]
    alternative_all = realized[at_price[np.arange(len(trips)), 1 - trip_assigned]]

    report = TwoPriceReport(
        upc=dataset.upcs[item],
        model=getattr(model, "name", type(model).__name__),
        cost=cost,
        prices=list(prices),
        preferred_price=prices[preferred],
        preferred_fraction=float(np.mean(assigned[shoppers] == preferred)) if shoppers.size else 0.0,
        groups=groups,
        targeted_profit=_mean_or_none(targeted_all),
        alternative_profit=_mean_or_none(alternative_all),
        pct_gain=_pct(_mean_or_none(targeted_all), _mean_or_none(alternative_all)),
    )
    assignment = pd.DataFrame({
        "household_id": [dataset.household_ids[h] for h in shoppers],
        "upc": dataset.upcs[item],
        "assigned_price": [prices[assigned[h]] for h in shoppers],
        **{f"expected_profit_{p:.2f}": mean_profit[shoppers, k] for k, p in enumerate(prices)},
    })
    for g in groups:
        if g.targeted_profit is None or g.alternative_profit is None:
            logger.info(f"{report.model} {report.upc}: price group {g.price:.2f} has no trips on one side")
    return report, assignment


def bucket_by_fraction(reports: List[TwoPriceReport], width: float = FRACTION_BUCKET) -> pd.DataFrame:
    """Mean profit gain by the share of households assigned to the preferred price."""
    n_buckets = int(round(1.0 / width))
    rows = []
    for r in reports:
        bucket = min(int(r.preferred_fraction / width), n_buckets - 1)
        rows.append({
            "bucket": bucket,
            "range": f"{100 * bucket * width:.0f}-{100 * (bucket + 1) * width:.0f}%",
            "pct_gain": r.pct_gain,
            "targeted_profit": r.targeted_profit,
            "alternative_profit": r.alternative_profit,
        })
    frame = pd.DataFrame(rows, columns=["bucket", "range", "pct_gain", "targeted_profit", "alternative_profit"])
    if frame.empty:
        return frame
    values = ["pct_gain", "targeted_profit", "alternative_profit"]
    frame[values] = frame[values].astype(float)
    return frame.groupby(["bucket", "range"], sort=True).agg(
        items=("pct_gain", "size"),
        mean_pct_gain=("pct_gain", "mean"),
        targeted_profit=("targeted_profit", "mean"),
        alternative_profit=("alternative_profit", "mean"),
    ).reset_index()
