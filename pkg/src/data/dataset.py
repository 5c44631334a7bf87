"""
Dense array view of a filtered panel, shared by every model and metric.

Items are indexed in session-grid order (category, then UPC). Trips are
indexed in (household, date) order.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.config import TUESDAY, WEDNESDAY
from src.data.panel import POOLED_SUFFIX, SPLIT_LABELS, SampleSplit, SessionGrid, TransactionPanel
from src.data.preprocessing import encode_covariates
from src.data.schemas import CovariateConfig
from src.utils.errors import DataError
from src.utils.logger import get_logger

logger = get_logger(__name__)

SPLIT_CODES: Dict[str, int] = {label: code for code, label in enumerate(SPLIT_LABELS)}


@dataclass(frozen=True)
class CategoryLayout:
    """
    Alternative space of one category for the logit baselines and evaluation.

    Alternatives are ordered by training popularity; items beyond the top ones
    share a trailing pooled alternative. ``item_alternative`` and
    ``pooled_weights`` are aligned with the category's items in grid order.
    """

    category: int
    items: np.ndarray
    labels: List[str]
    item_alternative: np.ndarray
    pooled_weights: np.ndarray

    @property
    def n_alternatives(self) -> int:
        return len(self.labels)

    @property
    def outside(self) -> int:
        """Column index of the outside good."""
        return len(self.labels)

    def alternative_of(self, item: int) -> int:
        pos = np.flatnonzero(self.items == item)
        if not pos.size:
            raise DataError(f"Item {item} is not in category {self.category}")
        return int(self.item_alternative[pos[0]])

    def is_single_item(self, alternative: int) -> bool:
        return int((self.item_alternative == alternative).sum()) == 1

    def aggregate(self, item_probs: np.ndarray) -> np.ndarray:
        """Sum item probabilities [n, J_c + 1] into alternatives [n, A + 1]."""
        n = item_probs.shape[0]
        out = np.zeros((n, self.n_alternatives + 1))
        np.add.at(out.T, self.item_alternative, item_probs[:, :-1].T)
        out[:, -1] = item_probs[:, -1]
        return out

    def alternative_prices(
        self, log_price: np.ndarray, available: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Alternative-level log prices and availability.

        A pooled alternative's price is the purchase-share-weighted mean price
        of its available items.
        """
        n = log_price.shape[0]
        weights = self.pooled_weights[None, :] * available
        total = np.zeros((n, self.n_alternatives))
        np.add.at(total.T, self.item_alternative, weights.T)
        value = np.zeros((n, self.n_alternatives))
        np.add.at(value.T, self.item_alternative, (weights * np.exp(log_price)).T)
        alt_available = total > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            alt_lp = np.where(alt_available, np.log(value / np.where(alt_available, total, 1.0)), 0.0)
        return alt_lp, alt_available


@dataclass(frozen=True)
class ChoiceDataset:
    """Arrays consumed by the models; see module docstring for index order."""

    household_ids: List[str]
    W: np.ndarray
    covariate_names: List[str]
    demographic_cells: np.ndarray
    upcs: List[str]
    item_category: np.ndarray
    categories: List[str]
    item_class: np.ndarray
    item_subclass: np.ndarray
    item_X: np.ndarray
    category_X: np.ndarray
    cost: np.ndarray
    weeks: List[int]
    price: np.ndarray
    available: np.ndarray
    week_rates: np.ndarray
    trip_household: np.ndarray
    trip_week: np.ndarray
    trip_day: np.ndarray
    trip_split: np.ndarray
    choices: np.ndarray
    valid: np.ndarray
    layouts: List[CategoryLayout] = field(default_factory=list)

    @property
    def n_households(self) -> int:
        return len(self.household_ids)

    @property
    def n_items(self) -> int:
        return len(self.upcs)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def n_trips(self) -> int:
        return len(self.trip_household)

    @property
    def n_weeks(self) -> int:
        return len(self.weeks)

    @property
    def log_price(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            lp = np.log(self.price)
        return np.where(self.available, lp, 0.0)

    def category_items(self, category: int) -> np.ndarray:
        return np.flatnonzero(self.item_category == category)

    def split_mask(self, label: str) -> np.ndarray:
        return self.trip_split == SPLIT_CODES[label]

    def household_index(self, ids) -> np.ndarray:
        lookup = {h: i for i, h in enumerate(self.household_ids)}
        try:
            return np.array([lookup[h] for h in ids], dtype=int)
        except KeyError as e:
            raise DataError(f"Unknown household id {e.args[0]}") from e

    def session_prices(
        self, category: int, weeks: np.ndarray, days: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Log prices and availability [n, J_c] of a category's items at the given sessions."""
        items = self.category_items(category)
        lp = self.log_price[items][:, weeks, days].T
        av = self.available[items][:, weeks, days].T
        return lp, av

    def observed_alternative(self, category: int, trips: np.ndarray) -> np.ndarray:
        """Alternative chosen on each trip; the outside good is ``layout.outside``."""
        layout = self.layouts[category]
        chosen = self.choices[trips, category]
        out = np.full(len(trips), layout.outside)
        bought = chosen >= 0
        position = np.searchsorted(layout.items, chosen[bought])
        out[bought] = layout.item_alternative[position]
        return out

    def purchase_counts(self, label: str = "train", level: str = "upc") -> np.ndarray:
        """Per-household purchase counts [N, J] (level='upc') or [N, C] (level='category')."""
        trips = np.flatnonzero(self.split_mask(label))
        n_cols = self.n_items if level == "upc" else self.n_categories
        counts = np.zeros((self.n_households, n_cols))
        for c in range(self.n_categories):
            chosen = self.choices[trips, c]
            bought = chosen >= 0
            hh = self.trip_household[trips[bought]]
            if level == "upc":
                np.add.at(counts, (hh, chosen[bought]), 1.0)
            else:
                np.add.at(counts[:, c], hh, 1.0)
        return counts

    def top_item(self, category: int) -> int:
        """The category's most purchased training item (its first alternative)."""
        layout = self.layouts[category]
        return int(layout.items[np.flatnonzero(layout.item_alternative == 0)[0]])

    def trip_counts(self, label: str) -> np.ndarray:
        return np.bincount(
            self.trip_household[self.split_mask(label)], minlength=self.n_households
        ).astype(float)


def _category_layouts(
    purchases: pd.DataFrame,
    train_trips: pd.DataFrame,
    upcs: List[str],
    item_category: np.ndarray,
    categories: List[str],
    top_items: int,
    pooling: Optional[pd.DataFrame]
) -> List[CategoryLayout]:
    train = purchases.merge(train_trips, on=["household_id", "week"])
    counts = train.groupby("upc").size().reindex(upcs, fill_value=0).to_numpy()
    pooled_lookup = None
    if pooling is not None:
        pooled_lookup = pooling.set_index("upc")["alternative"]

    layouts = []
    for c in range(len(categories)):
        items = np.flatnonzero(item_category == c)
        if pooled_lookup is not None:
            own = [j for j in items if not str(pooled_lookup.get(upcs[j], "")).endswith(POOLED_SUFFIX)]
        else:
            own = list(items)
        own = sorted(own, key=lambda j: (-counts[j], upcs[j]))[:top_items]
        rest = [j for j in items if j not in own]

        labels = [upcs[j] for j in own]
        alt_of = {j: a for a, j in enumerate(own)}
        weights = np.ones(len(items))
        if rest:
            labels.append(f"{categories[c]}{POOLED_SUFFIX}")
            pooled_counts = counts[rest].astype(float)
            shares = (
                pooled_counts / pooled_counts.sum() if pooled_counts.sum() > 0
                else np.full(len(rest), 1.0 / len(rest))
            )
            for j, share in zip(rest, shares):
                alt_of[j] = len(own)
                weights[np.flatnonzero(items == j)[0]] = share
        layouts.append(CategoryLayout(
            category=c,
            items=items,
            labels=labels,
            item_alternative=np.array([alt_of[j] for j in items], dtype=int),
            pooled_weights=weights,
        ))
    return layouts


def build_choice_dataset(
    panel: TransactionPanel,
    grid: SessionGrid,
    split: SampleSplit,
    covariates: Optional[CovariateConfig] = None,
    top_items: int = 10
) -> ChoiceDataset:
    """
    Assemble the dense dataset from a unit-demand panel, grid and split.

    Raises:
        DataError: If a trip still holds two purchases in one category
    """
    covariates = covariates or CovariateConfig()
    if grid.week_rates is None:
        grid = grid.with_week_rates(panel, split)

    households = panel.households.sort_values("household_id").reset_index(drop=True)
    W, names, cells = encode_covariates(households, covariates)
    household_ids = households["household_id"].tolist()
    hh_pos = {h: i for i, h in enumerate(household_ids)}

    hierarchy = panel.hierarchy.set_index("upc").reindex(grid.upcs)
    x_cols = sorted(c for c in hierarchy.columns if c.startswith("x_"))
    item_X = hierarchy[x_cols].to_numpy(dtype=float) if x_cols else np.zeros((len(grid.upcs), 0))
    category_X = np.vstack([
        item_X[grid.item_category == c].mean(axis=0) if item_X.shape[1] else np.zeros(0)
        for c in range(len(grid.categories))
    ]) if item_X.shape[1] else np.zeros((len(grid.categories), 0))

    min_price = panel.purchases.groupby("upc")["price"].min().reindex(grid.upcs)
    cost = hierarchy["cost"].fillna(min_price).to_numpy(dtype=float)
    item_class = pd.factorize(hierarchy["class"])[0]
    item_subclass = pd.factorize(hierarchy["subclass"])[0]

    trips = panel.trips.merge(split.assignments, on=["household_id", "week"], how="left")
    if trips["split"].isna().any():
        raise DataError("Split does not cover every (household, week) cell of the panel")
    week_pos = {w: t for t, w in enumerate(grid.weeks)}
    trips = trips[trips["week"].isin(week_pos)].reset_index(drop=True)
    trip_pos = pd.Series(
        np.arange(len(trips)), index=pd.MultiIndex.from_frame(trips[["household_id", "date"]])
    )

    item_pos = {u: j for j, u in enumerate(grid.upcs)}
    purchases = panel.purchases[panel.purchases["upc"].isin(item_pos)]
    dup = purchases.duplicated(["household_id", "date", "category"])
    if dup.any():
        raise DataError(f"{int(dup.sum())} trips hold several purchases in one category; resolve unit demand first")

    n_trips, n_cat = len(trips), len(grid.categories)
    choices = np.full((n_trips, n_cat), -1, dtype=int)
    rows = trip_pos.reindex(pd.MultiIndex.from_frame(purchases[["household_id", "date"]])).to_numpy()
    items = purchases["upc"].map(item_pos).to_numpy()
    keep = ~np.isnan(rows)
    rows = rows[keep].astype(int)
    items = items[keep]
    choices[rows, grid.item_category[items]] = items

    trip_week = trips["week"].map(week_pos).to_numpy()
    trip_day = trips["weekday"].map({TUESDAY: 0, WEDNESDAY: 1}).to_numpy()
    if np.isnan(trip_day.astype(float)).any():
        raise DataError("Dataset trips must fall on Tuesday or Wednesday; restrict the sample first")

    valid = np.ones((n_trips, n_cat), dtype=bool)
    bought = choices >= 0
    t_idx, c_idx = np.nonzero(bought)
    chosen_available = grid.available[choices[t_idx, c_idx], trip_week[t_idx], trip_day[t_idx]]
    valid[t_idx[~chosen_available], c_idx[~chosen_available]] = False
    if (~chosen_available).any():
        logger.warning(
            f"{int((~chosen_available).sum())} purchases of items marked unavailable; "
            "those trip-category cells are excluded"
        )

    train_trips = split.cells("train")
    layouts = _category_layouts(
        purchases, train_trips, grid.upcs, grid.item_category, grid.categories, top_items,
        panel.pooling
    )
    dataset = ChoiceDataset(
        household_ids=household_ids,
        W=W,
        covariate_names=names,
        demographic_cells=cells,
        upcs=list(grid.upcs),
        item_category=np.asarray(grid.item_category),
        categories=list(grid.categories),
        item_class=item_class,
        item_subclass=item_subclass,
        item_X=item_X,
        category_X=category_X,
        cost=cost,
        weeks=list(grid.weeks),
        price=grid.price,
        available=grid.available,
        week_rates=grid.week_rates,
        trip_household=trips["household_id"].map(hh_pos).to_numpy(),
        trip_week=trip_week.astype(int),
        trip_day=trip_day.astype(int),
        trip_split=trips["split"].map(SPLIT_CODES).to_numpy(),
        choices=choices,
        valid=valid,
        layouts=layouts,
    )
    logger.info(
        f"Dataset: {dataset.n_households} households, {dataset.n_items} items, "
        f"{dataset.n_categories} categories, {dataset.n_trips} trips"
    )
    return dataset
