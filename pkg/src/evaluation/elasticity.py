"""
Price elasticities by central finite differences on model probabilities.

One code path serves every demand model: prices of the moved item are scaled
by (1 + h) and (1 - h) and the change in log purchase probability is divided
by the change in log price.
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.config import ELASTICITY_STEP
from src.data.dataset import ChoiceDataset
from src.data.schemas import ElasticitySummary, EvaluationConfig
from src.evaluation.counterfactual import focal_items
from src.models.base import DemandModel, item_columns
from src.utils.errors import DataError
from src.utils.logger import get_logger

logger = get_logger(__name__)

TERCILE_LABELS = ("most elastic", "middle", "least elastic")


def _perturbed_probabilities(
    model: DemandModel,
    dataset: ChoiceDataset,
    category: int,
    mover: int,
    targets: Sequence[int],
    households: np.ndarray,
    weeks: np.ndarray,
    days: np.ndarray,
    step: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Base, raised and lowered probabilities [n, len(targets)] plus the mover's availability."""
    if not 0 < step < 1:
        raise ValueError(f"step must be in (0, 1), got {step}")
    items = dataset.category_items(category)
    pos = np.flatnonzero(items == mover)
    if not pos.size:
        raise DataError(f"Item {mover} is not in category {category}")
    lp, av = dataset.session_prices(category, weeks, days)
    up, down = lp.copy(), lp.copy()
    up[:, pos[0]] += np.log1p(step)
    down[:, pos[0]] += np.log1p(-step)
    base = item_columns(model, category, targets, households, weeks, days, lp, av)
    raised = item_columns(model, category, targets, households, weeks, days, up, av)
    lowered = item_columns(model, category, targets, households, weeks, days, down, av)
    return base, raised, lowered, av[:, pos[0]]


def elasticities(
    model: DemandModel,
    dataset: ChoiceDataset,
    category: int,
    mover: int,
    households: np.ndarray,
    weeks: np.ndarray,
    days: np.ndarray,
    targets: Optional[Sequence[int]] = None,
    step: float = ELASTICITY_STEP
) -> np.ndarray:
    """
    Elasticities [n, len(targets)] of each target's purchase probability with
    respect to the mover's price.

    Entries are NaN where the mover is unavailable or a baseline probability is 0.
    """
    targets = [mover] if targets is None else list(targets)
    households, weeks, days = (np.asarray(x, dtype=int) for x in (households, weeks, days))
    base, raised, lowered, mover_available = _perturbed_probabilities(
        model, dataset, category, mover, targets, households, weeks, days, step
    )
    denom = np.log1p(step) - np.log1p(-step)
    defined = (base > 0) & (raised > 0) & (lowered > 0) & mover_available[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        e = (np.log(raised) - np.log(lowered)) / denom
    return np.where(defined, e, np.nan)


def elasticity(
    model: DemandModel,
    dataset: ChoiceDataset,
    household: int,
    item: int,
    other: Optional[int] = None,
    week: int = 0,
    day: int = 0,
    step: float = ELASTICITY_STEP
) -> float:
    """
    Own elasticity of ``item``, or its cross elasticity with respect to the
    price of ``other``, for one household and session. NaN when undefined;
    0 when ``other`` belongs to another category.
    """
    category = int(dataset.item_category[item])
    mover = item if other is None else other
    if int(dataset.item_category[mover]) != category:
        return 0.0
    e = elasticities(model, dataset, category, mover, [household], [week], [day], [item], step)
    return float(e[0, 0])


def sample_sessions(
    dataset: ChoiceDataset, n_households: int, n_sessions: int, seed: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sampled household rows with random (week, day) sessions each, reproducible by seed."""
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(dataset.n_households, size=min(n_households, dataset.n_households), replace=False))
    households = np.repeat(chosen, n_sessions)
    weeks = rng.integers(0, dataset.n_weeks, size=len(households))
    days = rng.integers(0, 2, size=len(households))
    return households, weeks, days


def _pct_difference(inside: float, outside: float) -> Optional[float]:
    if not np.isfinite(inside) or not np.isfinite(outside) or outside == 0:
        return None
    return float(100.0 * (inside - outside) / abs(outside))


def _finite_or_none(x: float) -> Optional[float]:
    return float(x) if np.isfinite(x) else None


def elasticity_summary(
    model: DemandModel,
    dataset: ChoiceDataset,
    config: Optional[EvaluationConfig] = None,
    seed: int = 0,
    categories: Optional[Sequence[int]] = None
) -> Tuple[ElasticitySummary, pd.DataFrame]:
    """
    Own and cross price elasticities over a sampled household-by-session grid.

    Own elasticities are individual-level: the median over every sampled
    value, the SD of product means and the mean of within-product SDs. Cross
    elasticities are aggregate (change in summed probability) for every
    ordered pair of focal items in a category; their means are split by
    class, and by subclass among same-class pairs.

    Returns:
        Tuple of (summary, per-product own elasticity table)
    """
    config = config or EvaluationConfig()
    step = config.elasticity_step
    households, weeks, days = sample_sessions(
        dataset, config.elasticity_households, config.elasticity_sessions, seed
    )
    focal = set(focal_items(dataset))
    categories = range(dataset.n_categories) if categories is None else categories
    denom = np.log1p(step) - np.log1p(-step)

    own_values: List[float] = []
    product_rows = []
    cross_rows = []
    n_undefined = 0
    for c in categories:
        items = [j for j in dataset.category_items(c) if j in focal]
        for k in items:
            base, raised, lowered, mover_available = _perturbed_probabilities(
                model, dataset, c, k, items, households, weeks, days, step
            )
            col = items.index(k)
            defined = (base[:, col] > 0) & (raised[:, col] > 0) & (lowered[:, col] > 0) & mover_available
            n_undefined += int((~defined & mover_available).sum())
            own = (np.log(raised[defined, col]) - np.log(lowered[defined, col])) / denom
            if own.size:
                own_values.extend(own.tolist())
                product_rows.append({
                    "item": int(k), "upc": dataset.upcs[k], "category": dataset.categories[c],
                    "mean_own": float(own.mean()), "sd_own": float(own.std()), "n": int(own.size),
                })
            rows = mover_available
            for t, j in enumerate(items):
                if j == k:
                    continue
                up, down = raised[rows, t].sum(), lowered[rows, t].sum()
                if up <= 0 or down <= 0:
                    continue
                cross_rows.append({
                    "target": int(j), "mover": int(k),
                    "cross": float((np.log(up) - np.log(down)) / denom),
                    "same_class": bool(dataset.item_class[j] == dataset.item_class[k]),
                    "same_subclass": bool(dataset.item_subclass[j] == dataset.item_subclass[k]),
                })

    products = pd.DataFrame(product_rows, columns=["item", "upc", "category", "mean_own", "sd_own", "n"])
    cross = pd.DataFrame(cross_rows, columns=["target", "mover", "cross", "same_class", "same_subclass"])
    if n_undefined:
        logger.info(f"{model.name}: {n_undefined} own elasticities undefined (zero baseline probability)")

    def group_mean(mask: pd.Series) -> float:
        values = cross.loc[mask, "cross"]
        return float(values.mean()) if len(values) else float("nan")

    same_class = group_mean(cross["same_class"])
    other_class = group_mean(~cross["same_class"])
    same_sub = group_mean(cross["same_class"] & cross["same_subclass"])
    other_sub = group_mean(cross["same_class"] & ~cross["same_subclass"])
    summary = ElasticitySummary(
        model=model.name,
        median_own=_finite_or_none(np.median(own_values)) if own_values else None,
        sd_of_means=_finite_or_none(products["mean_own"].std(ddof=0)) if len(products) else None,
        mean_of_sds=_finite_or_none(products["sd_own"].mean()) if len(products) else None,
        cross_same_class=_finite_or_none(same_class),
        cross_other_class=_finite_or_none(other_class),
        class_pct_difference=_pct_difference(same_class, other_class),
        cross_same_subclass=_finite_or_none(same_sub),
        cross_other_subclass=_finite_or_none(other_sub),
        subclass_pct_difference=_pct_difference(same_sub, other_sub),
        n_products=len(products),
        n_households=len(np.unique(households)),
        n_undefined=n_undefined,
    )
    logger.info(
        f"{model.name}: median own elasticity {summary.median_own}, "
        f"class cross {summary.cross_same_class} vs {summary.cross_other_class}"
    )
    return summary, products


def split_terciles(scores: np.ndarray) -> List[np.ndarray]:
    """Positions split into three equal-count groups, most negative score first; ties by position."""
    order = np.lexsort((np.arange(len(scores)), scores))
    return np.array_split(order, 3)


def tercile_demand_validation(
    model: DemandModel,
    dataset: ChoiceDataset,
    events: pd.DataFrame,
    config: Optional[EvaluationConfig] = None,
    label: str = "test"
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Tuesday-to-Wednesday demand changes by predicted-elasticity tercile.

    For each focal item with own-price events, households shopping the
    category in its event weeks are split into terciles by their predicted
    own elasticity on the event Tuesdays. For each event and tercile the
    Wednesday-minus-Tuesday purchase rate is bucketed by log price change.

    Returns:
        Tuple of (bucket table with a sparse flag, per-tercile response table);
        response is minus the least-squares slope of rate change on log price
        change, so larger means more price responsive.
    """
    config = config or EvaluationConfig()
    own = events[events["event_type"] == "own-price"]
    in_split = dataset.split_mask(label)
    edges = np.asarray(config.price_change_bins, dtype=float)
    rows = []
    for item, group in own.groupby("item", sort=True):
        category = int(group["category"].iloc[0])
        event_weeks = group["week"].to_numpy()
        trips = np.flatnonzero(
            in_split & dataset.valid[:, category] & np.isin(dataset.trip_week, event_weeks)
        )
        shoppers = np.unique(dataset.trip_household[trips])
        if len(shoppers) < 3:
            continue
        hh = np.repeat(shoppers, len(event_weeks))
        wk = np.tile(event_weeks, len(shoppers))
        e = elasticities(model, dataset, category, int(item), hh, wk, np.zeros_like(wk),
                         step=config.elasticity_step)[:, 0]
        e = e.reshape(len(shoppers), -1)
        finite = np.isfinite(e)
        counts = finite.sum(axis=1)
        scores = np.where(counts > 0, np.where(finite, e, 0.0).sum(axis=1) / np.maximum(counts, 1), 0.0)
        tercile_of = {}
        for tercile, chunk in enumerate(split_terciles(scores)):
            for h in shoppers[chunk]:
                tercile_of[int(h)] = tercile

        for _, event in group.iterrows():
            week_trips = trips[dataset.trip_week[trips] == event["week"]]
            hh_terciles = np.array([tercile_of[int(h)] for h in dataset.trip_household[week_trips]])
            bought = dataset.choices[week_trips, category] == item
            day = dataset.trip_day[week_trips]
            d_log_price = float(np.log(event["wed_price"] / event["tue_price"]))
            for tercile in range(3):
                in_t = hh_terciles == tercile
                n_tue, n_wed = int((in_t & (day == 0)).sum()), int((in_t & (day == 1)).sum())
                if n_tue == 0 or n_wed == 0:
                    continue
                rows.append({
                    "item": int(item), "upc": dataset.upcs[item], "week": int(event["week"]),
                    "tercile": tercile, "d_log_price": d_log_price,
                    "bucket": int(np.digitize(d_log_price, edges)),
                    "tue_rate": bought[in_t & (day == 0)].mean(),
                    "wed_rate": bought[in_t & (day == 1)].mean(),
                    "shoppers": n_tue + n_wed,
                })

    detail = pd.DataFrame(rows, columns=[
        "item", "upc", "week", "tercile", "d_log_price", "bucket", "tue_rate", "wed_rate", "shoppers",
    ])
    detail["d_rate"] = detail["wed_rate"] - detail["tue_rate"]
    detail["weighted_d_rate"] = detail["d_rate"] * detail["shoppers"]
    buckets = detail.groupby(["tercile", "bucket"], sort=True).agg(
        weighted_d_rate=("weighted_d_rate", "sum"),
        d_log_price=("d_log_price", "mean"),
        shoppers=("shoppers", "sum"),
        events=("week", "size"),
    ).reset_index()
    buckets["d_rate"] = buckets["weighted_d_rate"] / buckets["shoppers"].where(buckets["shoppers"] > 0)
    buckets = buckets.drop(columns="weighted_d_rate")
    buckets["sparse"] = buckets["shoppers"] < config.min_tercile_shoppers
    buckets["tercile_label"] = buckets["tercile"].map(dict(enumerate(TERCILE_LABELS)))

    responses = []
    for tercile in range(3):
        part = detail[detail["tercile"] == tercile]
        x, y = part["d_log_price"].to_numpy(), part["d_rate"].to_numpy()
        denom = float(x @ x)
        responses.append({
            "tercile": tercile,
            "tercile_label": TERCILE_LABELS[tercile],
            "response": -float(x @ y) / denom if denom > 0 else np.nan,
            "events": len(part),
        })
    if buckets["sparse"].any():
        logger.info(f"{model.name}: {int(buckets['sparse'].sum())} tercile buckets below "
                    f"{config.min_tercile_shoppers} shoppers")
    return buckets, pd.DataFrame(responses)
