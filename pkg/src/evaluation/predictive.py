"""
Predictive fit, per-category ranks, personalization and never-buyer deciles.

All models are scored in the logit baselines' alternative space (top items,
pooled alternative, outside good) so that every model sees identical
observations.
"""

from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from src.config import MIN_ELIGIBLE_HOUSEHOLDS, PROBABILITY_FLOOR
from src.data.dataset import ChoiceDataset
from src.data.schemas import FitReport, PersonalizationReport
from src.models.base import DemandModel
from src.utils.errors import DataError
from src.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class CellPredictions:
    """Alternative probabilities of one category on a set of trips."""

    category: int
    trips: np.ndarray
    probabilities: np.ndarray
    observed: np.ndarray


def predict_cells(
    model: DemandModel, dataset: ChoiceDataset, category: int, label: str = "test"
) -> CellPredictions:
    """Predict every valid trip of a split for one category."""
    trips = np.flatnonzero(dataset.split_mask(label) & dataset.valid[:, category])
    probs = model.alternative_probabilities(
        category, dataset.trip_household[trips], dataset.trip_week[trips], dataset.trip_day[trips]
    )
    return CellPredictions(category, trips, probs, dataset.observed_alternative(category, trips))


def _cell_terms(probabilities: np.ndarray, observed: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int]:
    """Per-cell log-likelihood and squared error, plus the number of clipped cells."""
    probs = np.asarray(probabilities, dtype=float)
    observed = np.asarray(observed, dtype=int)
    rows = np.arange(len(observed))
    p_obs = probs[rows, observed]
    clipped = int((p_obs < PROBABILITY_FLOOR).sum())
    ll = np.log(np.clip(p_obs, PROBABILITY_FLOOR, 1.0))
    indicator = np.zeros_like(probs)
    indicator[rows, observed] = 1.0
    se = ((indicator - probs) ** 2).sum(axis=1)
    return ll, se, clipped


def predictive_fit(probabilities: np.ndarray, observed: np.ndarray) -> FitReport:
    """
    Mean log-likelihood and squared error per purchase.

    Args:
        probabilities: Alternative probabilities [n, A + 1], outside good last
        observed: Chosen column per cell (A means no purchase)

    Returns:
        FitReport; sums run over every cell and are divided by the number of purchases

    Raises:
        DataError: If there is no purchase to normalize by
    """
    probabilities = np.asarray(probabilities, dtype=float)
    outside = probabilities.shape[1] - 1
    n_purchases = int((np.asarray(observed) != outside).sum())
    if n_purchases == 0:
        raise DataError("No purchases to normalize predictive fit by")
    ll, se, clipped = _cell_terms(probabilities, observed)
    if clipped:
        logger.warning(f"{clipped} observed outcomes had probability below {PROBABILITY_FLOOR}; clipped")
    return FitReport(
        mean_log_likelihood=float(ll.sum() / n_purchases),
        mean_squared_error=float(se.sum() / n_purchases),
        n_purchases=n_purchases,
        n_cells=len(observed),
        n_clipped=clipped,
    )


def fit_table(
    models: Mapping[str, DemandModel],
    dataset: ChoiceDataset,
    labels: Sequence[str] = ("test",),
    categories: Optional[Sequence[int]] = None
) -> pd.DataFrame:
    """
    Predictive fit of every model per split and category.

    Rows with category 'all' pool the cells of every category.
    """
    categories = list(range(dataset.n_categories)) if categories is None else list(categories)
    rows = []
    for name, model in models.items():
        for label in labels:
            pooled_ll = pooled_se = 0.0
            pooled_purchases = pooled_cells = pooled_clipped = 0
            for c in categories:
                cells = predict_cells(model, dataset, c, label)
                outside = cells.probabilities.shape[1] - 1
                n_purchases = int((cells.observed != outside).sum())
                ll, se, clipped = _cell_terms(cells.probabilities, cells.observed)
                pooled_ll += ll.sum()
                pooled_se += se.sum()
                pooled_purchases += n_purchases
                pooled_cells += len(cells.observed)
                pooled_clipped += clipped
                rows.append({
                    "model": name, "split": label, "category": dataset.categories[c],
                    "mean_log_likelihood": ll.sum() / n_purchases if n_purchases else np.nan,
                    "mean_squared_error": se.sum() / n_purchases if n_purchases else np.nan,
                    "n_purchases": n_purchases, "n_cells": len(cells.observed), "n_clipped": clipped,
                })
            rows.append({
                "model": name, "split": label, "category": "all",
                "mean_log_likelihood": pooled_ll / pooled_purchases if pooled_purchases else np.nan,
                "mean_squared_error": pooled_se / pooled_purchases if pooled_purchases else np.nan,
                "n_purchases": pooled_purchases, "n_cells": pooled_cells, "n_clipped": pooled_clipped,
            })
            logger.info(
                f"{name} [{label}]: mean LL {rows[-1]['mean_log_likelihood']:.5f}, "
                f"MSE {rows[-1]['mean_squared_error']:.5f}"
            )
    return pd.DataFrame(rows)


def category_ranks(table: pd.DataFrame, split: str = "test") -> pd.DataFrame:
    """Per-category ranks (1 = best, ties averaged) by log-likelihood and squared error."""
    rows = table[(table["split"] == split) & (table["category"] != "all")].dropna(
        subset=["mean_log_likelihood", "mean_squared_error"]
    )
    ranked = []
    for category, group in rows.groupby("category", sort=True):
        group = group.sort_values("model")
        ll_rank = rankdata(-group["mean_log_likelihood"].to_numpy(), method="average")
        se_rank = rankdata(group["mean_squared_error"].to_numpy(), method="average")
        ranked.append(group.assign(
            rank_ll=ll_rank,
            rank_se=se_rank,
            best_ll=group["mean_log_likelihood"].to_numpy() == group["mean_log_likelihood"].max(),
            best_se=group["mean_squared_error"].to_numpy() == group["mean_squared_error"].min(),
        ))
    if not ranked:
        return pd.DataFrame(columns=["model", "category", "rank_ll", "rank_se", "best_ll", "best_se"])
    return pd.concat(ranked, ignore_index=True)[
        ["model", "category", "rank_ll", "rank_se", "best_ll", "best_se"]
    ]


def rank_models_by_category(table: pd.DataFrame, split: str = "test") -> pd.DataFrame:
    """
    Mean rank and share of categories where each model is best.

    Args:
        table: Output of fit_table with every model scored on the same cells

    Returns:
        DataFrame with model, mean_rank_ll, pct_best_ll, mean_rank_se, pct_best_se
    """
    ranks = category_ranks(table, split)
    summary = ranks.groupby("model", sort=True).agg(
        mean_rank_ll=("rank_ll", "mean"),
        pct_best_ll=("best_ll", "mean"),
        mean_rank_se=("rank_se", "mean"),
        pct_best_se=("best_se", "mean"),
        n_categories=("category", "nunique"),
    ).reset_index()
    summary["pct_best_ll"] *= 100.0
    summary["pct_best_se"] *= 100.0
    return summary


def _percentile_groups(values: np.ndarray, n_groups: int) -> np.ndarray:
    """Equal-count groups of ascending ``values``; ties broken by position."""
    order = np.lexsort((np.arange(len(values)), values))
    groups = np.empty(len(values), dtype=int)
    for g, chunk in enumerate(np.array_split(order, n_groups)):
        groups[chunk] = g
    return groups


def fit_by_segment(
    models: Mapping[str, DemandModel],
    dataset: ChoiceDataset,
    label: str = "test",
    n_groups: int = 5
) -> pd.DataFrame:
    """
    Predictive fit by household purchase-frequency and UPC popularity groups.

    Households are grouped by training purchases across categories; UPC
    groups score only the purchase cells of their items. Group 0 is the
    least active (least popular).
    """
    frequency = dataset.purchase_counts("train", level="category").sum(axis=1)
    household_group = _percentile_groups(frequency, n_groups)
    popularity = dataset.purchase_counts("train", level="upc").sum(axis=0)
    item_group = _percentile_groups(popularity, n_groups)

    rows = []
    for name, model in models.items():
        hh_ll, hh_se = np.zeros(n_groups), np.zeros(n_groups)
        hh_purchases = np.zeros(n_groups)
        item_ll, item_purchases = np.zeros(n_groups), np.zeros(n_groups)
        for c in range(dataset.n_categories):
            cells = predict_cells(model, dataset, c, label)
            ll, se, _ = _cell_terms(cells.probabilities, cells.observed)
            groups = household_group[dataset.trip_household[cells.trips]]
            bought = cells.observed != cells.probabilities.shape[1] - 1
            np.add.at(hh_ll, groups, ll)
            np.add.at(hh_se, groups, se)
            np.add.at(hh_purchases, groups, bought)
            chosen = dataset.choices[cells.trips[bought], c]
            np.add.at(item_ll, item_group[chosen], ll[bought])
            np.add.at(item_purchases, item_group[chosen], 1.0)
        for g in range(n_groups):
            rows.append({
                "model": name, "segment": "household", "group": g,
                "mean_log_likelihood": hh_ll[g] / hh_purchases[g] if hh_purchases[g] else np.nan,
                "mean_squared_error": hh_se[g] / hh_purchases[g] if hh_purchases[g] else np.nan,
                "n_purchases": int(hh_purchases[g]),
            })
            rows.append({
                "model": name, "segment": "upc", "group": g,
                "mean_log_likelihood": item_ll[g] / item_purchases[g] if item_purchases[g] else np.nan,
                "mean_squared_error": np.nan,
                "n_purchases": int(item_purchases[g]),
            })
    return pd.DataFrame(rows)


def household_rates(
    model: DemandModel,
    dataset: ChoiceDataset,
    label: str = "test",
    level: str = "upc"
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[str]]:
    """
    Predicted and actual purchase rates per household and column.

    Columns are the single-item alternatives (level 'upc') or categories
    (level 'category'). Rates are per valid trip of the split.

    Returns:
        Tuple of (predicted [N, X], actual [N, X], trips [N, X], column labels)
    """
    if level not in ("upc", "category"):
        raise ValueError(f"level must be 'upc' or 'category', got '{level}'")
    predicted, actual, trips, labels = [], [], [], []
    N = dataset.n_households
    for c in range(dataset.n_categories):
        cells = predict_cells(model, dataset, c, label)
        layout = dataset.layouts[c]
        hh = dataset.trip_household[cells.trips]
        n_trips = np.bincount(hh, minlength=N).astype(float)
        if level == "category":
            columns = [(1.0 - cells.probabilities[:, -1], cells.observed != layout.outside)]
            labels.append(dataset.categories[c])
        else:
            columns = []
            for a, name in enumerate(layout.labels):
                if layout.is_single_item(a):
                    columns.append((cells.probabilities[:, a], cells.observed == a))
                    labels.append(name)
        for p, y in columns:
            pred = np.zeros(N)
            act = np.zeros(N)
            np.add.at(pred, hh, p)
            np.add.at(act, hh, y.astype(float))
            predicted.append(pred)
            actual.append(act)
            trips.append(n_trips)
    trips_arr = np.column_stack(trips)
    with np.errstate(invalid="ignore", divide="ignore"):
        pred_rate = np.column_stack(predicted) / trips_arr
        act_rate = np.column_stack(actual) / trips_arr
    return pred_rate, act_rate, trips_arr, labels


def personalization_metrics(
    predicted: np.ndarray, actual: np.ndarray, level: str = "upc"
) -> PersonalizationReport:
    """
    Coefficient of variation of predictions across households, and the
    fixed-effects slope of actual on predicted rates.

    NaN entries (households without trips) are ignored. The slope absorbs a
    fixed effect per column by demeaning both rates within the column.
    """
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    covs = []
    num = den = 0.0
    for x in range(predicted.shape[1]):
        keep = np.isfinite(predicted[:, x]) & np.isfinite(actual[:, x])
        p, y = predicted[keep, x], actual[keep, x]
        if p.size == 0:
            continue
        mean = p.mean()
        covs.append(p.std() / mean if mean > 0 else 0.0)
        p_dev, y_dev = p - mean, y - y.mean()
        num += float(p_dev @ y_dev)
        den += float(p_dev @ p_dev)
    slope_defined = den > 0
    return PersonalizationReport(
        level=level,
        coefficient_of_variation=float(np.mean(covs)) if covs else 0.0,
        slope=num / den if slope_defined else None,
        slope_defined=slope_defined,
        n_columns=len(covs),
        n_households=int(np.isfinite(predicted).any(axis=1).sum()),
    )


def decile_split(scores: np.ndarray, n_bins: int = 10) -> List[np.ndarray]:
    """Positions split into equal-count bins of ascending score; ties by position."""
    order = np.lexsort((np.arange(len(scores)), scores))
    return np.array_split(order, n_bins)


def never_buyer_deciles(
    model: DemandModel,
    dataset: ChoiceDataset,
    test_label: str = "test",
    level: str = "upc",
    min_eligible: int = MIN_ELIGIBLE_HOUSEHOLDS,
    n_bins: int = 10
) -> Tuple[pd.DataFrame, int]:
    """
    Test purchase rates of training never-buyers by predicted-rate decile.

    For each column, households with zero training purchases and at least
    one test trip are ranked by predicted test rate (ties by household
    index) and cut into equal-count deciles; decile 1 has the lowest
    predictions. Columns with fewer than ``min_eligible`` households are
    skipped.

    Returns:
        Tuple of (decile table pooled over columns, number of skipped columns)
    """
    predicted, actual, trips, labels = household_rates(model, dataset, test_label, level)
    train_counts = dataset.purchase_counts("train", level="category" if level == "category" else "upc")
    if level == "upc":
        columns = []
        for c in range(dataset.n_categories):
            layout = dataset.layouts[c]
            for a in range(layout.n_alternatives):
                if layout.is_single_item(a):
                    columns.append(int(layout.items[layout.item_alternative == a][0]))
        train_counts = train_counts[:, columns]

    purchases = np.zeros(n_bins)
    n_trips = np.zeros(n_bins)
    n_households = np.zeros(n_bins)
    predicted_sum = np.zeros(n_bins)
    skipped = 0
    for x in range(predicted.shape[1]):
        eligible = np.flatnonzero((train_counts[:, x] == 0) & (trips[:, x] > 0))
        if len(eligible) < max(min_eligible, n_bins):
            skipped += 1
            continue
        for b, chunk in enumerate(decile_split(predicted[eligible, x], n_bins)):
            hh = eligible[chunk]
            purchases[b] += np.sum(actual[hh, x] * trips[hh, x])
            n_trips[b] += np.sum(trips[hh, x])
            n_households[b] += len(hh)
            predicted_sum[b] += np.sum(predicted[hh, x] * trips[hh, x])
    if skipped:
        logger.info(f"Never-buyer deciles: skipped {skipped} of {predicted.shape[1]} columns")
    with np.errstate(invalid="ignore", divide="ignore"):
        table = pd.DataFrame({
            "decile": np.arange(1, n_bins + 1),
            "households": n_households.astype(int),
            "trips": n_trips.astype(int),
            "purchases": purchases.astype(int),
            "purchase_rate": purchases / n_trips,
            "mean_predicted": predicted_sum / n_trips,
        })
    return table, skipped
