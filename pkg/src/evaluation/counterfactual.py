"""
Tuesday-to-Wednesday quasi-experiments: event extraction and event likelihoods.

Most price changes happen on Tuesday night, so the Tuesday session is a
baseline and the Wednesday session a treatment for the item whose price (or
whose competitors' prices or availability) changed in between.
"""

from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd
from scipy.special import gammaln, ive

from src.config import (
    BOOTSTRAP_REPLICATES,
    MIN_PRICE_CHANGE,
    POPULAR_DAILY_PURCHASES,
    PRICE_CHANGE_TOLERANCE,
    PROBABILITY_FLOOR,
    SKELLAM_LAMBDA_FLOOR,
)
from src.data.dataset import ChoiceDataset
from src.data.schemas import EventReport, EventTypeReport
from src.models.base import DemandModel, item_columns
from src.utils.logger import get_logger

logger = get_logger(__name__)

EVENT_TYPES = ("own-price", "cross-price", "out-of-stock")
EVENT_COLUMNS = [
    "event_type", "item", "upc", "category", "week", "week_id", "magnitude", "tue_price", "wed_price",
]


def focal_items(dataset: ChoiceDataset) -> List[int]:
    """Items that form their own alternative in every model's scoring space."""
    items = []
    for layout in dataset.layouts:
        for a in range(layout.n_alternatives):
            if layout.is_single_item(a):
                items.append(int(layout.items[layout.item_alternative == a][0]))
    return sorted(items)


def extract_events(
    grid,
    items: Optional[Iterable[int]] = None,
    min_change: float = MIN_PRICE_CHANGE,
    tolerance: float = PRICE_CHANGE_TOLERANCE
) -> pd.DataFrame:
    """
    Own-price, cross-price and out-of-stock events of a session grid.

    Args:
        grid: SessionGrid or ChoiceDataset (upcs, item_category, weeks, price, available)
        items: Focal item indices (defaults to every item)
        min_change: Smallest price change in dollars that counts as an event
        tolerance: Price differences up to this are treated as unchanged

    Returns:
        DataFrame with one row per (event type, focal item, week), sorted by
        type, item and week. Magnitude is the own change, the largest signed
        competitor change, or the net change in the number of available
        competitors.
    """
    price = np.asarray(grid.price, dtype=float)
    available = np.asarray(grid.available, dtype=bool)
    item_category = np.asarray(grid.item_category)
    items = range(price.shape[0]) if items is None else sorted(set(int(j) for j in items))
    threshold = min_change - 1e-9

    with np.errstate(invalid="ignore"):
        delta = np.where(available.all(axis=2), price[:, :, 1] - price[:, :, 0], 0.0)
    both_days = available.all(axis=2)
    availability_change = available[:, :, 1].astype(int) - available[:, :, 0].astype(int)

    rows = []
    for j in items:
        category = int(item_category[j])
        others = np.flatnonzero(item_category == category)
        others = others[others != j]
        for t in np.flatnonzero(both_days[j]):
            own = delta[j, t]
            base = {
                "item": j, "upc": grid.upcs[j], "category": category, "week": int(t),
                "week_id": int(grid.weeks[t]), "tue_price": float(price[j, t, 0]),
                "wed_price": float(price[j, t, 1]),
            }
            if abs(own) >= threshold:
                rows.append({**base, "event_type": "own-price", "magnitude": float(own)})
                continue
            if abs(own) > tolerance or not len(others):
                continue
            cross = delta[others, t]
            moved = np.abs(cross) >= threshold
            if moved.any():
                largest = cross[moved][np.argmax(np.abs(cross[moved]))]
                rows.append({**base, "event_type": "cross-price", "magnitude": float(largest)})
            stocked = availability_change[others, t]
            if np.any(stocked != 0):
                rows.append({**base, "event_type": "out-of-stock", "magnitude": float(stocked.sum())})

    events = pd.DataFrame(rows, columns=EVENT_COLUMNS)
    order = {name: i for i, name in enumerate(EVENT_TYPES)}
    events = events.assign(_order=events["event_type"].map(order))
    events = events.sort_values(["_order", "item", "week"], kind="mergesort").drop(columns="_order")
    return events.reset_index(drop=True)


def skellam_log_pmf(k, lambda1, lambda2) -> np.ndarray:
    """
    Log probability that N1 - N2 = k for independent Poisson(lambda1), Poisson(lambda2).

    Uses the exponentially scaled Bessel function, falling back to the
    leading series term where it underflows.

    Raises:
        ValueError: If a rate is not positive and finite
    """
    k = np.asarray(k, dtype=float)
    l1 = np.asarray(lambda1, dtype=float)
    l2 = np.asarray(lambda2, dtype=float)
    if np.any(~np.isfinite(l1)) or np.any(~np.isfinite(l2)) or np.any(l1 <= 0) or np.any(l2 <= 0):
        raise ValueError("Skellam rates must be positive and finite")
    order = np.abs(k)
    x = 2.0 * np.sqrt(l1 * l2)
    scaled = ive(order, x)
    with np.errstate(divide="ignore"):
        log_bessel = np.where(
            scaled > 0,
            np.log(np.where(scaled > 0, scaled, 1.0)) + x,
            order * np.log(x / 2.0) - gammaln(order + 1.0),
        )
    out = -(l1 + l2) + 0.5 * k * (np.log(l1) - np.log(l2)) + log_bessel
    return out if out.ndim else float(out)


def bernoulli_log_likelihood(outcome: np.ndarray, probability: np.ndarray) -> np.ndarray:
    """Elementwise Bernoulli log-likelihood with probabilities clipped away from 0 and 1."""
    p = np.clip(np.asarray(probability, dtype=float), PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR)
    y = np.asarray(outcome, dtype=float)
    return y * np.log(p) + (1.0 - y) * np.log1p(-p)


def daily_purchase_rates(dataset: ChoiceDataset) -> np.ndarray:
    """
    Mean purchases per session day of every item over all trips.

    Every split counts, so an item's Skellam or Bernoulli branch is the same
    whichever split is scored.
    """
    counts = np.zeros(dataset.n_items)
    for c in range(dataset.n_categories):
        chosen = dataset.choices[:, c]
        np.add.at(counts, chosen[chosen >= 0], 1.0)
    return counts / max(2 * dataset.n_weeks, 1)


def score_events(
    model: DemandModel,
    events: pd.DataFrame,
    dataset: ChoiceDataset,
    label: str = "test",
    popular_threshold: float = POPULAR_DAILY_PURCHASES
) -> pd.DataFrame:
    """
    Per-event individual and aggregate log-likelihoods.

    The individual measure sums Bernoulli log-likelihoods of buying the focal
    item over the split's trips in the event week. The aggregate measure is a
    Skellam log-likelihood of the Wednesday-minus-Tuesday purchase count for
    items bought at least ``popular_threshold`` times per day, and otherwise
    the sum over both days of a Bernoulli log-likelihood of any purchase with
    mean equal to the summed probabilities.

    Returns:
        Events that had shoppers, with columns individual_ll, n_trips,
        aggregate_ll, branch and skipped (bool)
    """
    rates = daily_purchase_rates(dataset)
    in_split = dataset.split_mask(label)
    scored = events.copy()
    for column, default in (("individual_ll", np.nan), ("n_trips", 0), ("aggregate_ll", np.nan)):
        scored[column] = default
    scored["branch"] = ""
    scored["skipped"] = False

    for (category, week), group in events.groupby(["category", "week"], sort=True):
        trips = np.flatnonzero(in_split & dataset.valid[:, category] & (dataset.trip_week == week))
        if not len(trips):
            scored.loc[group.index, "skipped"] = True
            continue
        days = dataset.trip_day[trips]
        items = group["item"].to_numpy()
        probs = item_columns(
            model, category, items, dataset.trip_household[trips], dataset.trip_week[trips], days
        )
        chosen = dataset.choices[trips, category]
        for col, (index, item) in enumerate(zip(group.index, items)):
            bought = (chosen == item).astype(float)
            p = probs[:, col]
            lam = np.array([p[days == d].sum() for d in (0, 1)])
            counts = np.array([bought[days == d].sum() for d in (0, 1)])
            if rates[item] >= popular_threshold:
                lam = np.maximum(lam, SKELLAM_LAMBDA_FLOOR)
                aggregate = skellam_log_pmf(counts[1] - counts[0], lam[1], lam[0])
                branch = "skellam"
            else:
                aggregate = float(bernoulli_log_likelihood(counts > 0, lam).sum())
                branch = "bernoulli"
            scored.loc[index, "individual_ll"] = float(bernoulli_log_likelihood(bought, p).sum())
            scored.loc[index, "n_trips"] = len(trips)
            scored.loc[index, "aggregate_ll"] = float(aggregate)
            scored.loc[index, "branch"] = branch
    return scored


def _bootstrap(values: np.ndarray, weights: np.ndarray, replicates: int, rng: np.random.Generator) -> float:
    """Standard error of a ratio of sums under resampling of events."""
    if len(values) < 2 or replicates < 2:
        return float("nan")
    draws = rng.integers(0, len(values), size=(replicates, len(values)))
    stats = values[draws].sum(axis=1) / weights[draws].sum(axis=1)
    return float(stats.std(ddof=1))


def summarize_events(
    scored: pd.DataFrame,
    model_name: str,
    replicates: int = BOOTSTRAP_REPLICATES,
    seed: int = 0
) -> EventReport:
    """Pool scored events per type with event-resampling standard errors."""
    rng = np.random.default_rng(seed)
    by_type: Dict[str, EventTypeReport] = {}
    for event_type in EVENT_TYPES:
        rows = scored[scored["event_type"] == event_type]
        kept = rows[~rows["skipped"]]
        report = EventTypeReport(
            event_type=event_type,
            n_events=len(kept),
            n_skipped=int(rows["skipped"].sum()),
            n_skellam=int((kept["branch"] == "skellam").sum()),
            n_bernoulli=int((kept["branch"] == "bernoulli").sum()),
        )
        if len(kept):
            ll = kept["individual_ll"].to_numpy(dtype=float)
            trips = kept["n_trips"].to_numpy(dtype=float)
            aggregate = kept["aggregate_ll"].to_numpy(dtype=float)
            ones = np.ones(len(kept))
            report = report.model_copy(update={
                "individual_mean_ll": float(ll.sum() / trips.sum()),
                "individual_se": _finite(_bootstrap(ll, trips, replicates, rng)),
                "aggregate_mean_ll": float(aggregate.mean()),
                "aggregate_se": _finite(_bootstrap(aggregate, ones, replicates, rng)),
            })
        if report.n_skipped:
            logger.info(f"{model_name}: skipped {report.n_skipped} {event_type} events without shoppers")
        by_type[event_type] = report
    return EventReport(model=model_name, by_type=by_type)


def _finite(x: float) -> Optional[float]:
    return float(x) if np.isfinite(x) else None


def counterfactual_event_likelihood(
    model: DemandModel,
    events: pd.DataFrame,
    dataset: ChoiceDataset,
    label: str = "test",
    popular_threshold: float = POPULAR_DAILY_PURCHASES,
    replicates: int = BOOTSTRAP_REPLICATES,
    seed: int = 0
) -> EventReport:
    """
    Individual and aggregate event log-likelihoods of one model.

    Args:
        model: Any demand model
        events: Output of extract_events
        dataset: Dense choice dataset
        label: Split whose trips are scored
        popular_threshold: Daily purchase rate from which the Skellam branch is used
        replicates: Bootstrap replicates over events
        seed: Bootstrap seed
    """
    scored = score_events(model, events, dataset, label, popular_threshold)
    report = summarize_events(scored, getattr(model, "name", type(model).__name__), replicates, seed)
    for event_type, r in report.by_type.items():
        if r.n_events:
            logger.info(
                f"{report.model} {event_type}: {r.n_events} events, individual LL "
                f"{r.individual_mean_ll:.5f}, aggregate LL {r.aggregate_mean_ll:.5f}"
            )
    return report
