"""
Shopping-panel ingestion, sample restriction, category filters and the
Tuesday/Wednesday session grid.

The panel is a set of immutable pandas tables. Every function returns a new
panel and never mutates its input.
"""

import json
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.config import SESSION_WEEKDAYS, TUESDAY, WEDNESDAY
from src.data import preprocessing
from src.data.schemas import (
    FilterConfig,
    FilterDecision,
    GridConfig,
    SampleConfig,
    SplitConfig,
)
from src.utils.errors import DataError, MissingArtifactError
from src.utils.logger import get_logger

logger = get_logger(__name__)

TRANSACTION_COLUMNS = ["household_id", "date", "upc", "quantity", "price", "oos_flag"]
HIERARCHY_COLUMNS = ["upc", "category", "class", "subclass", "cost"]
SPLIT_LABELS = ["train", "validation", "test"]
POOLED_SUFFIX = "::pooled"


@dataclass(frozen=True)
class TransactionPanel:
    """
    Household shopping records against a product hierarchy.

    Attributes:
        purchases: household_id, date, week, weekday, upc, category, quantity, price
        oos: Out-of-stock flags (household_id, date, week, weekday, upc)
        visits: Every shopping trip (household_id, date, week, weekday), including
            trips without a purchase in the retained categories
        households: household_id plus optional demographic columns
        hierarchy: upc, category, class, subclass, cost and optional x_* covariates
        origin: Monday of week 0
        rejected: Rows dropped at ingestion with a reason
        filter_log: Category filter decisions (empty before filtering)
        pooling: upc, category, alternative (set by the category filters)
        seasonality_reference: Sorted UPC Herfindahl values of the first filter pass
        seasonality_cutoff: Mean top-item percentile above which categories are dropped
    """

    purchases: pd.DataFrame
    oos: pd.DataFrame
    visits: pd.DataFrame
    households: pd.DataFrame
    hierarchy: pd.DataFrame
    origin: date
    rejected: pd.DataFrame = field(default_factory=pd.DataFrame)
    filter_log: Tuple[FilterDecision, ...] = ()
    pooling: Optional[pd.DataFrame] = None
    seasonality_reference: Optional[np.ndarray] = None
    seasonality_cutoff: Optional[float] = None

    @property
    def trips(self) -> pd.DataFrame:
        """One row per household per calendar day."""
        return self.visits

    @property
    def categories(self) -> List[str]:
        return sorted(self.purchases["category"].unique())

    @property
    def weeks(self) -> List[int]:
        return sorted(int(w) for w in self.trips["week"].unique())


def week_index(dates: pd.Series, origin: date) -> pd.Series:
    """Week number of each date counted from the Monday ``origin``."""
    return ((dates - pd.Timestamp(origin)).dt.days // 7).astype(int)


def _monday_on_or_before(day: pd.Timestamp) -> date:
    return (day - timedelta(days=day.dayofweek)).date()


def _read_table(path: Path, separator: str, what: str) -> pd.DataFrame:
    if not Path(path).exists():
        raise DataError(f"{what} file not found: {path}")
    try:
        return pd.read_csv(path, sep=separator, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise DataError(f"Cannot parse {what} file {path}: {e}") from e


def _parse_hierarchy(raw: pd.DataFrame) -> pd.DataFrame:
    missing = [c for c in HIERARCHY_COLUMNS[:4] if c not in raw.columns]
    if missing:
        raise DataError(f"Hierarchy file is missing columns {missing}")
    hierarchy = raw.copy()
    for col in ["upc", "category", "class", "subclass"]:
        hierarchy[col] = hierarchy[col].str.strip()
    if "cost" not in hierarchy.columns:
        hierarchy["cost"] = ""
    hierarchy["cost"] = pd.to_numeric(hierarchy["cost"].replace("", np.nan), errors="coerce")
    if (hierarchy["cost"] <= 0).any():
        bad = hierarchy.loc[hierarchy["cost"] <= 0, "upc"].tolist()
        raise DataError(f"Marginal cost must be positive, got non-positive cost for {bad}")
    for col in [c for c in hierarchy.columns if c.startswith("x_")]:
        hierarchy[col] = pd.to_numeric(hierarchy[col], errors="raise")

    chains = hierarchy.drop_duplicates(["upc", "category", "class", "subclass"])
    dup = chains["upc"].duplicated(keep=False)
    if dup.any():
        raise DataError(
            f"UPCs map to more than one hierarchy chain: {sorted(chains.loc[dup, 'upc'].unique())}"
        )
    hierarchy = hierarchy.drop_duplicates("upc").sort_values("upc").reset_index(drop=True)
    return hierarchy


def _parse_transactions(raw: pd.DataFrame) -> pd.DataFrame:
    """Validate raw rows; malformed rows raise with their file line number."""
    missing = [c for c in TRANSACTION_COLUMNS if c not in raw.columns]
    if missing:
        raise DataError(f"Transactions file is missing columns {missing}")

    rows = raw[TRANSACTION_COLUMNS].copy()
    rows["line"] = np.arange(len(rows)) + 2  # header is line 1
    rows["household_id"] = rows["household_id"].str.strip()
    rows["upc"] = rows["upc"].str.strip()
    dates = pd.to_datetime(rows["date"], format="%Y-%m-%d", errors="coerce")
    quantity = pd.to_numeric(rows["quantity"].replace("", "0"), errors="coerce")
    price = pd.to_numeric(rows["price"].replace("", np.nan), errors="coerce")
    oos = rows["oos_flag"].replace("", "0")

    problems = [
        (rows["household_id"] == "", "empty household_id"),
        (rows["upc"] == "", "empty upc"),
        (dates.isna(), "unparseable date"),
        (quantity.isna() | (quantity < 0) | (quantity % 1 != 0), "quantity must be a non-negative integer"),
        (~oos.isin(["0", "1"]), "oos_flag must be 0 or 1"),
        ((quantity >= 1) & ~(price > 0), "purchase without a positive price"),
    ]
    for mask, message in problems:
        if mask.any():
            first = rows.loc[mask.to_numpy()].iloc[0]
            raise DataError(f"Malformed transaction at line {first['line']}: {message}")

    rows["date"] = dates
    rows["quantity"] = quantity.astype(int)
    rows["price"] = price
    rows["oos_flag"] = oos.astype(int)
    return rows


def panel_from_frames(
    transactions: pd.DataFrame,
    hierarchy: pd.DataFrame,
    households: Optional[pd.DataFrame] = None,
    origin: Optional[date] = None,
    visits: Optional[pd.DataFrame] = None
) -> TransactionPanel:
    """
    Build a panel from parsed tables.

    Args:
        transactions: household_id, date (datetime), upc, quantity, price, oos_flag, line
        hierarchy: Parsed hierarchy table
        households: Optional household table
        origin: Monday of week 0 (default: Monday on or before the first date)
        visits: Trip table (household_id, date); derived from the rows when omitted

    Returns:
        TransactionPanel with rejected rows reported separately
    """
    if transactions.empty:
        raise DataError("Transactions file contains no rows")
    if visits is None:
        visits = transactions[["household_id", "date"]]
    if origin is None:
        origin = _monday_on_or_before(visits["date"].min())
    visits = visits[["household_id", "date"]].drop_duplicates()
    visits = visits.assign(
        week=week_index(visits["date"], origin),
        weekday=visits["date"].dt.dayofweek.astype(int),
    ).sort_values(["household_id", "date"]).reset_index(drop=True)

    known = transactions["upc"].isin(hierarchy["upc"])
    zero = (transactions["quantity"] == 0) & (transactions["oos_flag"] == 0)
    rejected = pd.concat([
        transactions.loc[~known].assign(reason="unknown upc"),
        transactions.loc[known & zero].assign(reason="zero quantity without out-of-stock flag"),
    ])
    if len(rejected):
        logger.warning(f"Rejected {len(rejected)} transaction rows (see rejection report)")
    rows = transactions.loc[known & ~zero]
    rows = rows.assign(
        week=week_index(rows["date"], origin),
        weekday=rows["date"].dt.dayofweek.astype(int),
    )
    category = hierarchy.set_index("upc")["category"]

    purchases = rows.loc[rows["quantity"] >= 1, [
        "household_id", "date", "week", "weekday", "upc", "quantity", "price"
    ]].copy()
    purchases["category"] = purchases["upc"].map(category)
    oos = rows.loc[rows["oos_flag"] == 1, ["household_id", "date", "week", "weekday", "upc"]]
    oos = oos.drop_duplicates()

    ids = sorted(visits["household_id"].unique())
    if households is None or households.empty:
        households = pd.DataFrame({"household_id": ids})
    else:
        households = households[households["household_id"].isin(ids)]
        missing = sorted(set(ids) - set(households["household_id"]))
        if missing:
            raise DataError(f"Households missing from the household file: {missing[:10]}")

    return TransactionPanel(
        purchases=_canonical(purchases),
        oos=_canonical(oos),
        visits=visits,
        households=households.sort_values("household_id").reset_index(drop=True),
        hierarchy=hierarchy,
        origin=origin,
        rejected=rejected.reset_index(drop=True),
    )


def _canonical(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.sort_values(["household_id", "date", "upc"], kind="mergesort").reset_index(drop=True)


def _parse_households(raw: pd.DataFrame) -> pd.DataFrame:
    households = raw.copy()
    households["household_id"] = households["household_id"].str.strip()
    households = households.replace("", np.nan)
    for col in ["age", "income", "household_size", "children"]:
        if col in households.columns:
            households[col] = pd.to_numeric(households[col], errors="coerce")
    if households["household_id"].duplicated().any():
        raise DataError("Household file lists a household more than once")
    return households


def ingest_transactions(
    transactions_path: Path,
    hierarchy_path: Path,
    households_path: Optional[Path] = None,
    separator: str = ",",
    origin: Optional[date] = None,
    trips_path: Optional[Path] = None
) -> TransactionPanel:
    """
    Read delimited transaction, hierarchy and optional household files.

    Transaction columns: household_id, date (YYYY-MM-DD), upc, quantity,
    price, oos_flag. Rows with oos_flag=1 record that the UPC was out of stock
    on that trip.

    Raises:
        DataError: Malformed rows (with line number) or unreadable files
    """
    hierarchy = _parse_hierarchy(_read_table(hierarchy_path, separator, "hierarchy"))
    transactions = _parse_transactions(_read_table(transactions_path, separator, "transactions"))
    households = None
    if households_path is not None:
        households = _parse_households(_read_table(households_path, separator, "households"))
    visits = None
    if trips_path is not None:
        visits = _read_table(trips_path, separator, "trips")
        visits["date"] = pd.to_datetime(visits["date"], format="%Y-%m-%d")
    panel = panel_from_frames(transactions, hierarchy, households, origin, visits)
    logger.info(
        f"Ingested {len(panel.purchases)} purchases, {len(panel.oos)} out-of-stock flags, "
        f"{panel.households.shape[0]} households"
    )
    return panel


def export_panel(panel: TransactionPanel, directory: Path, separator: str = ",") -> Dict[str, Path]:
    """
    Write the panel in the ingestion format plus its metadata.

    ``ingest_transactions`` on the written files (with the stored origin)
    reproduces the panel.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    purchases = panel.purchases.assign(oos_flag=0)
    oos = panel.oos.assign(quantity=0, price=np.nan, oos_flag=1)
    rows = pd.concat([purchases, oos])[TRANSACTION_COLUMNS]
    rows = rows.sort_values(["household_id", "date", "upc", "oos_flag"], kind="mergesort")
    rows["date"] = rows["date"].dt.strftime("%Y-%m-%d")

    paths = {
        "transactions": directory / "transactions.csv",
        "hierarchy": directory / "hierarchy.csv",
        "households": directory / "households.csv",
        "trips": directory / "trips.csv",
        "meta": directory / "panel.json",
    }
    rows.to_csv(paths["transactions"], sep=separator, index=False)
    trips = panel.visits[["household_id", "date"]].assign(date=panel.visits["date"].dt.strftime("%Y-%m-%d"))
    trips.to_csv(paths["trips"], sep=separator, index=False)
    panel.hierarchy.to_csv(paths["hierarchy"], sep=separator, index=False)
    panel.households.to_csv(paths["households"], sep=separator, index=False)
    if len(panel.rejected):
        paths["rejected"] = directory / "rejected.csv"
        panel.rejected.to_csv(paths["rejected"], index=False)

    meta = {"origin": panel.origin.isoformat(), "separator": separator}
    if panel.seasonality_reference is not None:
        meta["seasonality_reference"] = [float(v) for v in panel.seasonality_reference]
        meta["seasonality_cutoff"] = panel.seasonality_cutoff
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True))

    if panel.filter_log:
        paths["filter_log"] = directory / "filter_log.json"
        paths["filter_log"].write_text(json.dumps(
            [d.model_dump() for d in panel.filter_log], indent=2, sort_keys=True
        ))
    if panel.pooling is not None:
        paths["pooling"] = directory / "pooling.csv"
        panel.pooling.to_csv(paths["pooling"], index=False)
    return paths


def load_panel(directory: Path, command: str = "ingest") -> TransactionPanel:
    """Load a panel written by ``export_panel``."""
    directory = Path(directory)
    meta_path = directory / "panel.json"
    if not meta_path.exists():
        raise MissingArtifactError(meta_path, command)
    meta = json.loads(meta_path.read_text())
    sep = meta.get("separator", ",")
    panel = ingest_transactions(
        directory / "transactions.csv",
        directory / "hierarchy.csv",
        directory / "households.csv",
        separator=sep,
        origin=date.fromisoformat(meta["origin"]),
        trips_path=directory / "trips.csv",
    )
    extras = {}
    if "seasonality_reference" in meta:
        extras["seasonality_reference"] = np.asarray(meta["seasonality_reference"])
        extras["seasonality_cutoff"] = meta["seasonality_cutoff"]
    if (directory / "filter_log.json").exists():
        extras["filter_log"] = tuple(
            FilterDecision.model_validate(d)
            for d in json.loads((directory / "filter_log.json").read_text())
        )
    if (directory / "pooling.csv").exists():
        extras["pooling"] = pd.read_csv(directory / "pooling.csv", dtype=str)
    return replace(panel, **extras) if extras else panel


def _restrict(
    panel: TransactionPanel,
    households: Optional[List[str]] = None,
    drop_weeks: Optional[List[int]] = None,
    weekdays: Optional[List[int]] = None,
    categories: Optional[List[str]] = None
) -> TransactionPanel:
    def mask(frame: pd.DataFrame) -> pd.Series:
        m = pd.Series(True, index=frame.index)
        if households is not None:
            m &= frame["household_id"].isin(households)
        if drop_weeks:
            m &= ~frame["week"].isin(drop_weeks)
        if weekdays is not None:
            m &= frame["weekday"].isin(weekdays)
        return m

    purchases = panel.purchases[mask(panel.purchases)]
    oos = panel.oos[mask(panel.oos)]
    visits = panel.visits[mask(panel.visits)]
    hierarchy = panel.hierarchy
    if categories is not None:
        purchases = purchases[purchases["category"].isin(categories)]
        hierarchy = hierarchy[hierarchy["category"].isin(categories)]
        oos = oos[oos["upc"].isin(hierarchy["upc"])]
    kept_households = panel.households
    if households is not None:
        kept_households = kept_households[kept_households["household_id"].isin(households)]
    return replace(
        panel,
        purchases=purchases.reset_index(drop=True),
        oos=oos.reset_index(drop=True),
        visits=visits.reset_index(drop=True),
        households=kept_households.reset_index(drop=True),
        hierarchy=hierarchy.reset_index(drop=True),
    )


def holiday_weeks(config: SampleConfig, origin: date) -> List[int]:
    """Weeks to exclude: the week containing the day before each holiday, plus explicit weeks."""
    weeks = {((h - timedelta(days=1)) - origin).days // 7 for h in config.holiday_dates}
    return sorted(weeks | set(config.excluded_weeks))


def restrict_sample(panel: TransactionPanel, config: SampleConfig) -> TransactionPanel:
    """
    Restrict to the working sample.

    Households are kept when their total trip count (all weekdays) lies in
    [min_trips, max_trips] and their demographics are complete. Then only
    Tuesday/Wednesday records outside excluded weeks are retained.

    Raises:
        DataError: If nothing remains ("empty sample")
    """
    trips = panel.trips.groupby("household_id").size()
    in_band = trips[(trips >= config.min_trips) & (trips <= config.max_trips)].index
    logger.info(
        f"Trip band [{config.min_trips}, {config.max_trips}] keeps {len(in_band)} of "
        f"{len(trips)} households"
    )
    keep = set(in_band)
    if preprocessing.has_demographics(panel.households):
        complete = panel.households.dropna(subset=preprocessing.DEMOGRAPHIC_COLUMNS)["household_id"]
        incomplete = keep - set(complete)
        if incomplete:
            logger.warning(f"Dropping {len(incomplete)} households with incomplete demographics")
        keep &= set(complete)

    excluded = holiday_weeks(config, panel.origin)
    if excluded:
        logger.info(f"Excluding weeks {excluded}")
    restricted = _restrict(
        panel,
        households=sorted(keep),
        drop_weeks=excluded,
        weekdays=SESSION_WEEKDAYS,
    )
    if restricted.purchases.empty:
        raise DataError("Restriction produced an empty sample")
    return restricted


def _seasonality_percentiles(herfindahl: pd.Series, reference: np.ndarray) -> pd.Series:
    ranks = np.searchsorted(reference, herfindahl.to_numpy(), side="right")
    return pd.Series(ranks / len(reference), index=herfindahl.index)


def apply_category_filters(
    panel: TransactionPanel,
    config: FilterConfig,
    tolerance: float = 0.005
) -> Tuple[List[str], TransactionPanel]:
    """
    Apply the category filters and pool items beyond the top ones.

    Filters, in order: fewer than two items; multi-item trips; correlated
    prices; too little Tue->Wed price variation; seasonality (the most
    concentrated daily demand, by mean Herfindahl percentile of the top items).
    A panel that was already filtered reuses its stored seasonality reference,
    so re-applying the filters keeps the same categories.

    Returns:
        Tuple of (kept categories, filtered panel with filter_log and pooling)
    """
    purchases = panel.purchases
    top = preprocessing.top_items_by_category(purchases, config.top_items)
    multi = preprocessing.multi_item_shares(purchases, top)
    session_prices = preprocessing.modal_session_prices(purchases)
    n_weeks = len(panel.weeks)
    items_per_category = purchases.groupby("category")["upc"].nunique()

    herfindahl = preprocessing.herfindahl_by_upc(purchases)
    reference = panel.seasonality_reference
    if reference is None:
        reference = np.sort(herfindahl.to_numpy())
    percentiles = _seasonality_percentiles(herfindahl, reference)

    decisions: Dict[str, FilterDecision] = {}
    scores: Dict[str, float] = {}
    for category in panel.categories:
        upcs = top.get(category, [])
        n_varying, change_share = preprocessing.price_change_statistics(
            session_prices, upcs, n_weeks, config.min_price_change, tolerance
        )
        score = float(percentiles.reindex(upcs).mean()) if upcs else 0.0
        stats = {
            "n_items": float(items_per_category.get(category, 0)),
            "multi_item_share": float(multi["multi_item_share"].get(category, 0.0)),
            "multi_top_item_share": float(multi["multi_top_item_share"].get(category, 0.0)),
            "price_correlation": preprocessing.mean_abs_price_correlation(session_prices, upcs),
            "items_with_variation": float(n_varying),
            "large_change_week_share": change_share,
            "seasonality_percentile": score,
        }
        reasons = []
        if stats["n_items"] < 2:
            reasons.append(f"degenerate: {int(stats['n_items'])} item(s)")
        if stats["multi_item_share"] > config.max_multi_item_share:
            reasons.append(f"multi_item_share {stats['multi_item_share']:.3f} > {config.max_multi_item_share}")
        if stats["multi_top_item_share"] > config.max_multi_top_item_share:
            reasons.append(
                f"multi_top_item_share {stats['multi_top_item_share']:.3f} > {config.max_multi_top_item_share}"
            )
        if stats["price_correlation"] > config.max_price_correlation:
            reasons.append(f"price_correlation {stats['price_correlation']:.3f} > {config.max_price_correlation}")
        if n_varying < config.min_items_with_variation:
            reasons.append(f"items_with_variation {n_varying} < {config.min_items_with_variation}")
        if change_share < config.min_price_change_week_share:
            reasons.append(
                f"large_change_week_share {change_share:.3f} < {config.min_price_change_week_share}"
            )
        decisions[category] = FilterDecision(
            category=category, kept=not reasons, reasons=reasons, statistics=stats
        )
        if not reasons:
            scores[category] = score

    # Most seasonal categories go; ties at the cutoff stay
    cutoff = panel.seasonality_cutoff
    if cutoff is None:
        ordered = sorted(scores.values())
        n_drop = int(np.floor(config.seasonality_drop_fraction * len(ordered)))
        cutoff = ordered[len(ordered) - n_drop - 1] if 0 < n_drop < len(ordered) else np.inf
    for category, score in scores.items():
        if score > cutoff:
            decisions[category] = decisions[category].model_copy(update={
                "kept": False,
                "reasons": [f"seasonality_percentile {score:.3f} > cutoff {cutoff:.3f}"],
            })

    for decision in decisions.values():
        if decision.kept:
            logger.info(f"Category {decision.category} kept")
        else:
            logger.info(f"Category {decision.category} removed: {'; '.join(decision.reasons)}")

    kept = sorted(c for c, d in decisions.items() if d.kept)
    filtered = _restrict(panel, categories=kept)
    pooling = pd.DataFrame(
        [
            (upc, category, upc if upc in top[category] else f"{category}{POOLED_SUFFIX}")
            for category, group in filtered.hierarchy.groupby("category", sort=True)
            for upc in sorted(group["upc"])
        ],
        columns=["upc", "category", "alternative"],
    )
    filtered = replace(
        filtered,
        filter_log=tuple(decisions[c] for c in sorted(decisions)),
        pooling=pooling,
        seasonality_reference=reference,
        seasonality_cutoff=float(cutoff),
    )
    logger.info(f"Category filters kept {len(kept)} of {len(decisions)} categories")
    return kept, filtered


def resolve_unit_demand(purchases: pd.DataFrame, seed: int) -> pd.DataFrame:
    """
    Keep one purchase per (household, day, category), chosen uniformly at random.

    Repeated rows of the same UPC are merged first, so every distinct item of
    the trip is equally likely to be kept.
    """
    keys = ["household_id", "date", "category"]
    merged = (
        purchases.groupby(keys + ["upc"], sort=True)
        .agg(week=("week", "first"), weekday=("weekday", "first"),
             quantity=("quantity", "sum"), price=("price", "first"))
        .reset_index()
    )
    rng = np.random.default_rng(seed)
    merged["_key"] = rng.random(len(merged))
    picked = merged.loc[merged.groupby(keys, sort=False)["_key"].idxmin()]
    n_dropped = len(purchases) - len(picked)
    if n_dropped:
        logger.debug(f"Unit demand dropped {n_dropped} purchase rows")
    return _canonical(picked.drop(columns="_key")[purchases.columns])


def resolve_panel_unit_demand(panel: TransactionPanel, seed: int) -> TransactionPanel:
    """Panel-level wrapper of ``resolve_unit_demand``."""
    return replace(panel, purchases=resolve_unit_demand(panel.purchases, seed))


@dataclass(frozen=True)
class SessionGrid:
    """
    Price and availability per (upc, week, session day).

    ``price`` and ``available`` are indexed [item, week position, day] with
    day 0 = Tuesday and 1 = Wednesday. ``week_rates`` is [category, week
    position] once attached.
    """

    upcs: List[str]
    categories: List[str]
    item_category: np.ndarray
    weeks: List[int]
    price: np.ndarray
    available: np.ndarray
    dispersion: pd.DataFrame = field(default_factory=pd.DataFrame)
    week_rates: Optional[np.ndarray] = None

    @property
    def n_items(self) -> int:
        return len(self.upcs)

    @property
    def log_price(self) -> np.ndarray:
        """Log prices with unavailable cells set to 0."""
        with np.errstate(invalid="ignore", divide="ignore"):
            lp = np.log(self.price)
        return np.where(self.available, lp, 0.0)

    def category_items(self, category: int) -> np.ndarray:
        return np.flatnonzero(self.item_category == category)

    def subset(self, upcs: List[str], weeks: List[int]) -> "SessionGrid":
        """
        Restrict to the given items and weeks, keeping grid order.

        Raises:
            DataError: If an item or week is not on the grid
        """
        item_pos = {u: j for j, u in enumerate(self.upcs)}
        week_pos = {w: t for t, w in enumerate(self.weeks)}
        missing = [u for u in upcs if u not in item_pos] + [w for w in weeks if w not in week_pos]
        if missing:
            raise DataError(f"Not on the session grid: {missing[:10]}")
        items = sorted(item_pos[u] for u in upcs)
        cols = sorted(week_pos[w] for w in weeks)
        used = sorted(set(self.item_category[items].tolist()))
        remap = {c: i for i, c in enumerate(used)}
        return SessionGrid(
            upcs=[self.upcs[j] for j in items],
            categories=[self.categories[c] for c in used],
            item_category=np.array([remap[c] for c in self.item_category[items]], dtype=int),
            weeks=[self.weeks[t] for t in cols],
            price=self.price[np.ix_(items, cols, [0, 1])],
            available=self.available[np.ix_(items, cols, [0, 1])],
            dispersion=self.dispersion,
        )

    def to_frame(self) -> pd.DataFrame:
        j, t, d = np.meshgrid(
            np.arange(len(self.upcs)), np.arange(len(self.weeks)), [0, 1], indexing="ij"
        )
        return pd.DataFrame({
            "upc": np.asarray(self.upcs)[j.ravel()],
            "category": np.asarray(self.categories)[self.item_category[j.ravel()]],
            "week": np.asarray(self.weeks)[t.ravel()],
            "weekday": np.asarray(SESSION_WEEKDAYS)[d.ravel()],
            "price": self.price.ravel(),
            "available": self.available.ravel(),
        })

    def with_week_rates(self, panel: TransactionPanel, split: Optional["SampleSplit"] = None) -> "SessionGrid":
        """Attach weekly category purchase rates computed from training trips."""
        trips = panel.trips
        purchases = panel.purchases
        if split is not None:
            train = split.cells("train")
            trips = trips.merge(train, on=["household_id", "week"])
            purchases = purchases.merge(train, on=["household_id", "week"])
        n_trips = trips.groupby("week").size().reindex(self.weeks, fill_value=0)
        bought = (
            purchases.drop_duplicates(["household_id", "date", "category"])
            .groupby(["category", "week"]).size()
            .unstack("week").reindex(index=self.categories, columns=self.weeks).fillna(0.0)
        )
        with np.errstate(invalid="ignore", divide="ignore"):
            rates = bought.to_numpy() / n_trips.to_numpy()[None, :]
        rates = np.nan_to_num(rates, nan=0.0)
        return replace(self, week_rates=rates)

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(directory / "grid.csv", index=False)
        self.dispersion.to_csv(directory / "dispersion.csv", index=False)
        if self.week_rates is not None:
            pd.DataFrame(self.week_rates, index=self.categories, columns=self.weeks).to_csv(
                directory / "week_rates.csv"
            )

    @classmethod
    def load(cls, directory: Path, command: str = "filter") -> "SessionGrid":
        directory = Path(directory)
        path = directory / "grid.csv"
        if not path.exists():
            raise MissingArtifactError(path, command)
        frame = pd.read_csv(path, dtype={"upc": str, "category": str})
        upcs = list(dict.fromkeys(frame["upc"]))
        weeks = sorted(frame["week"].unique().tolist())
        categories = sorted(frame["category"].unique().tolist())
        shape = (len(upcs), len(weeks), 2)
        item_cat = frame.drop_duplicates("upc")["category"].map(
            {c: i for i, c in enumerate(categories)}
        ).to_numpy()
        rates = None
        if (directory / "week_rates.csv").exists():
            rates = pd.read_csv(directory / "week_rates.csv", index_col=0).to_numpy()
        dispersion = pd.DataFrame()
        if (directory / "dispersion.csv").exists() and (directory / "dispersion.csv").stat().st_size > 1:
            dispersion = pd.read_csv(directory / "dispersion.csv", dtype={"upc": str})
        return cls(
            upcs=upcs,
            categories=categories,
            item_category=item_cat,
            weeks=[int(w) for w in weeks],
            price=frame["price"].to_numpy().reshape(shape),
            available=frame["available"].astype(bool).to_numpy().reshape(shape),
            dispersion=dispersion,
            week_rates=rates,
        )


def build_session_grid(panel: TransactionPanel, config: GridConfig) -> SessionGrid:
    """
    Build the session grid from a filtered panel.

    Price is the modal transaction price of the session; sessions without
    purchases carry the previous session's price forward. An item is
    unavailable when more than ``out_of_stock_share`` of the day's trips flag
    it out of stock, or when no price is known yet.
    """
    hierarchy = panel.hierarchy.sort_values(["category", "upc"])
    hierarchy = hierarchy[hierarchy["upc"].isin(panel.purchases["upc"])]
    upcs = hierarchy["upc"].tolist()
    categories = sorted(hierarchy["category"].unique())
    item_category = hierarchy["category"].map({c: i for i, c in enumerate(categories)}).to_numpy()
    weeks = panel.weeks
    item_pos = {u: j for j, u in enumerate(upcs)}
    week_pos = {w: t for t, w in enumerate(weeks)}
    day_pos = {TUESDAY: 0, WEDNESDAY: 1}

    session_prices = preprocessing.modal_session_prices(
        panel.purchases[panel.purchases["upc"].isin(item_pos)]
    )
    price = np.full((len(upcs), len(weeks), 2), np.nan)
    price[
        session_prices["upc"].map(item_pos).to_numpy(),
        session_prices["week"].map(week_pos).to_numpy(),
        session_prices["weekday"].map(day_pos).to_numpy(),
    ] = session_prices["price"].to_numpy()

    # Carry forward in session order (Tue, Wed, next Tue, ...)
    flat = pd.DataFrame(price.reshape(len(upcs), -1).T).ffill().to_numpy().T
    price = flat.reshape(price.shape)
    no_source = np.isnan(price)

    trips = panel.trips
    trips_per_day = trips.groupby("date").size()
    flags = panel.oos[panel.oos["upc"].isin(item_pos)]
    flagged = flags.groupby(["upc", "date", "week", "weekday"]).size().rename("n").reset_index()
    flagged["share"] = flagged["n"] / flagged["date"].map(trips_per_day)
    stocked_out = flagged[flagged["share"] > config.out_of_stock_share]

    available = ~no_source
    available[
        stocked_out["upc"].map(item_pos).to_numpy(),
        stocked_out["week"].map(week_pos).to_numpy(),
        stocked_out["weekday"].map(day_pos).to_numpy(),
    ] = False

    if no_source.any():
        logger.warning(
            f"{int(no_source.sum())} item-sessions have no observed or carried price; "
            "marked unavailable"
        )
    dispersion = session_prices[session_prices["n_prices"] > 1].reset_index(drop=True)
    if len(dispersion):
        logger.info(f"{len(dispersion)} item-sessions show intra-day price dispersion")

    return SessionGrid(
        upcs=upcs,
        categories=categories,
        item_category=item_category,
        weeks=list(weeks),
        price=price,
        available=available,
        dispersion=dispersion,
    )


@dataclass(frozen=True)
class SampleSplit:
    """Train/validation/test label per (household, week) cell."""

    assignments: pd.DataFrame
    scheme: str = "household-week"

    def cells(self, label: str) -> pd.DataFrame:
        rows = self.assignments[self.assignments["split"] == label]
        return rows[["household_id", "week"]].reset_index(drop=True)

    def counts(self) -> Dict[str, int]:
        counts = self.assignments["split"].value_counts()
        return {label: int(counts.get(label, 0)) for label in SPLIT_LABELS}

    def save(self, path: Path) -> None:
        self.assignments.to_csv(path, index=False)

    @classmethod
    def load(cls, path: Path, command: str = "filter") -> "SampleSplit":
        if not Path(path).exists():
            raise MissingArtifactError(path, command)
        return cls(pd.read_csv(path, dtype={"household_id": str}))


def price_change_cells(panel: TransactionPanel, grid: SessionGrid, tolerance: float) -> pd.Series:
    """
    Flag (household, week) cells containing a purchase of an item whose own
    price changed between Tuesday and Wednesday of that week.
    """
    both = grid.available.all(axis=2)
    changed = both & (np.abs(grid.price[:, :, 1] - grid.price[:, :, 0]) > tolerance)
    item_pos = {u: j for j, u in enumerate(grid.upcs)}
    week_pos = {w: t for t, w in enumerate(grid.weeks)}
    purchases = panel.purchases[panel.purchases["upc"].isin(item_pos)]
    hit = changed[
        purchases["upc"].map(item_pos).to_numpy(),
        purchases["week"].map(week_pos).to_numpy(),
    ]
    flags = purchases.assign(change=hit).groupby(["household_id", "week"])["change"].any()
    return flags


def split_holdout(
    panel: TransactionPanel,
    config: SplitConfig,
    seed: int,
    grid: Optional[SessionGrid] = None,
    tolerance: float = 0.005
) -> SampleSplit:
    """
    Assign every (household, week) cell to train, validation or test.

    The test cells are drawn uniformly. Validation cells are then drawn from
    the rest without replacement, with price-change cells weighted by
    ``price_change_weight``.
    """
    cells = (
        panel.trips[["household_id", "week"]].drop_duplicates()
        .sort_values(["household_id", "week"]).reset_index(drop=True)
    )
    n = len(cells)
    n_test = int(round(config.test_fraction * n))
    n_val = int(round(config.validation_fraction * n))
    rng = np.random.default_rng(seed)

    labels = np.array(["train"] * n, dtype=object)
    test_idx = rng.permutation(n)[:n_test]
    labels[test_idx] = "test"

    weights = np.ones(n)
    if grid is not None:
        flags = price_change_cells(panel, grid, tolerance)
        key = pd.MultiIndex.from_frame(cells)
        change = flags.reindex(key, fill_value=False).to_numpy(dtype=bool)
        weights[change] = config.price_change_weight
    remaining = np.flatnonzero(labels == "train")
    if n_val:
        p = weights[remaining] / weights[remaining].sum()
        val_idx = rng.choice(remaining, size=n_val, replace=False, p=p)
        labels[val_idx] = "validation"

    split = SampleSplit(cells.assign(split=labels), scheme=config.scheme)
    logger.info(f"Holdout split {split.counts()}")
    return split
