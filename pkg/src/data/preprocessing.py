"""
Household covariate encoding and per-category sample statistics.
"""

from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
from sklearn.preprocessing import OneHotEncoder

from src.config import TUESDAY, WEDNESDAY
from src.data.schemas import CovariateConfig
from src.utils.errors import DataError
from src.utils.logger import get_logger

logger = get_logger(__name__)

# Fixed level orders; the first level of each column is the dropped reference
GENDER_LEVELS: List[str] = ["F", "M"]
MARITAL_LEVELS: List[str] = ["single", "married"]
INCOME_LEVELS: List[str] = ["low", "high"]
CHILDREN_LEVELS: List[str] = ["0", "1", "2", "3+"]
DEMOGRAPHIC_COLUMNS: List[str] = [
    "age", "gender", "marital_status", "income", "household_size", "children"
]


def age_levels(config: CovariateConfig) -> List[str]:
    """Names of the age buckets implied by the configured boundaries."""
    edges = [int(b) if float(b).is_integer() else b for b in config.age_buckets]
    names = [f"under_{edges[0]}"]
    names.extend(f"{lo}_{hi}" for lo, hi in zip(edges, edges[1:]))
    names.append(f"over_{edges[-1]}")
    return names


def size_levels(config: CovariateConfig) -> List[str]:
    """Household size levels, the last one open-ended."""
    cap = config.household_size_cap
    return [str(s) for s in range(1, cap)] + [f"{cap}+"]


def has_demographics(households: pd.DataFrame) -> bool:
    """Whether the household table carries the demographic columns."""
    return all(col in households.columns for col in DEMOGRAPHIC_COLUMNS)


def bucket_demographics(households: pd.DataFrame, config: CovariateConfig) -> pd.DataFrame:
    """
    Map raw demographics onto categorical buckets.

    Args:
        households: Table with household_id and the raw demographic columns
        config: Bucket boundaries

    Returns:
        DataFrame indexed like the input with columns age_bucket, gender,
        marital_status, income_level, household_size, children

    Raises:
        DataError: If a value is missing or outside the documented levels
    """
    missing = households[DEMOGRAPHIC_COLUMNS].isna().any(axis=1)
    if missing.any():
        ids = households.loc[missing, "household_id"].tolist()[:10]
        raise DataError(f"Missing demographics for households {ids} (no imputation is performed)")

    edges = [-np.inf] + list(config.age_buckets) + [np.inf]
    out = pd.DataFrame(index=households.index)
    out["age_bucket"] = pd.cut(
        households["age"].astype(float), bins=edges, right=False, labels=age_levels(config)
    ).astype(str)
    out["gender"] = households["gender"].astype(str).str.strip().str.upper().str[:1]
    out["marital_status"] = households["marital_status"].astype(str).str.strip().str.lower()
    out["income_level"] = np.where(
        households["income"].astype(float) >= config.income_split, "high", "low"
    )
    cap = config.household_size_cap
    size = households["household_size"].astype(int).clip(lower=1)
    out["household_size"] = np.where(size >= cap, f"{cap}+", size.astype(str))
    children = households["children"].astype(int).clip(lower=0)
    out["children"] = np.where(children >= 3, "3+", children.astype(str))

    checks = {
        "gender": GENDER_LEVELS,
        "marital_status": MARITAL_LEVELS,
    }
    for col, levels in checks.items():
        bad = ~out[col].isin(levels)
        if bad.any():
            raise DataError(
                f"{col} must be one of {levels}, got {sorted(out.loc[bad, col].unique())}"
            )
    return out


def create_covariate_encoder(config: CovariateConfig) -> OneHotEncoder:
    """
    Create a fixed-width one-hot encoder with a dropped reference level.

    Returns:
        Unfitted OneHotEncoder over (age_bucket, gender, marital_status,
        income_level, household_size)
    """
    categories = [
        age_levels(config), GENDER_LEVELS, MARITAL_LEVELS, INCOME_LEVELS, size_levels(config)
    ]
    return OneHotEncoder(
        categories=categories, drop="first", sparse_output=False, handle_unknown="error"
    )


ENCODED_COLUMNS: List[str] = ["age_bucket", "gender", "marital_status", "income_level", "household_size"]


def encode_covariates(
    households: pd.DataFrame,
    config: CovariateConfig
) -> Tuple[np.ndarray, List[str], np.ndarray]:
    """
    Encode household demographics into the covariate matrix W.

    The first column is a constant intercept. Households without demographic
    columns get the intercept only.

    Args:
        households: Table with household_id (+ demographics), in dataset order
        config: Bucket configuration

    Returns:
        Tuple of (W [N, D], column names, demographic cell labels [N])
    """
    n = len(households)
    if not has_demographics(households):
        logger.info("No demographics available; covariates reduce to an intercept")
        return np.ones((n, 1)), ["intercept"], np.array(["all"] * n, dtype=object)

    buckets = bucket_demographics(households, config)
    encoder = create_covariate_encoder(config)
    encoded = encoder.fit_transform(buckets[ENCODED_COLUMNS])
    names = ["intercept"] + list(encoder.get_feature_names_out(ENCODED_COLUMNS))
    W = np.hstack([np.ones((n, 1)), encoded])

    cells = (
        buckets["marital_status"] + "|" + buckets["income_level"] + "|"
        + buckets["age_bucket"] + "|" + buckets["children"]
    ).to_numpy(dtype=object)
    return W, names, cells


def top_items_by_category(purchases: pd.DataFrame, top_n: int) -> Dict[str, List[str]]:
    """
    Rank items in each category by number of purchases.

    Ties are broken by UPC so the ranking is reproducible.
    """
    counts = (
        purchases.groupby(["category", "upc"]).size().rename("n").reset_index()
        .sort_values(["category", "n", "upc"], ascending=[True, False, True])
    )
    return {
        cat: group["upc"].head(top_n).tolist()
        for cat, group in counts.groupby("category", sort=True)
    }


def multi_item_shares(purchases: pd.DataFrame, top_items: Dict[str, List[str]]) -> pd.DataFrame:
    """
    Share of category trips containing more than one distinct item.

    Returns:
        DataFrame indexed by category with columns multi_item_share and
        multi_top_item_share
    """
    trip_keys = ["household_id", "date", "category"]
    per_trip = purchases.groupby(trip_keys)["upc"].nunique().rename("n_items").reset_index()
    top_pairs = pd.DataFrame(
        [(cat, upc) for cat, upcs in top_items.items() for upc in upcs],
        columns=["category", "upc"]
    )
    top_rows = purchases.merge(top_pairs, on=["category", "upc"])
    per_trip_top = top_rows.groupby(trip_keys)["upc"].nunique().rename("n_top").reset_index()
    per_trip = per_trip.merge(per_trip_top, on=trip_keys, how="left").fillna({"n_top": 0})

    grouped = per_trip.groupby("category")
    return pd.DataFrame({
        "multi_item_share": grouped["n_items"].apply(lambda s: float((s > 1).mean())),
        "multi_top_item_share": grouped["n_top"].apply(lambda s: float((s > 1).mean())),
    })


def modal_session_prices(purchases: pd.DataFrame) -> pd.DataFrame:
    """
    Modal transaction price per (upc, week, weekday), ties toward the lower price.

    Returns:
        DataFrame with upc, week, weekday, price, n_prices, min_price, max_price
    """
    keys = ["upc", "week", "weekday"]
    counts = purchases.groupby(keys + ["price"]).size().rename("n").reset_index()
    counts = counts.sort_values(keys + ["n", "price"], ascending=[True, True, True, False, True])
    modal = counts.groupby(keys, sort=True).head(1)[keys + ["price"]]
    spread = purchases.groupby(keys)["price"].agg(
        n_prices="nunique", min_price="min", max_price="max"
    ).reset_index()
    return modal.merge(spread, on=keys).sort_values(keys).reset_index(drop=True)


def tue_wed_prices(session_prices: pd.DataFrame) -> pd.DataFrame:
    """Pivot session prices to one row per (upc, week) with Tue and Wed columns."""
    wide = session_prices.pivot_table(
        index=["upc", "week"], columns="weekday", values="price", aggfunc="first"
    )
    wide = wide.reindex(columns=[TUESDAY, WEDNESDAY])
    wide.columns = ["tue", "wed"]
    return wide.reset_index()


def price_change_statistics(
    session_prices: pd.DataFrame,
    upcs: List[str],
    n_weeks: int,
    min_change: float,
    tolerance: float
) -> Tuple[int, float]:
    """
    Tue->Wed price variation of a set of items.

    Args:
        session_prices: Output of modal_session_prices
        upcs: Items to inspect (a category's top items)
        n_weeks: Number of sample weeks (share denominator)
        min_change: Change magnitude that counts as a large change
        tolerance: Smallest difference treated as a change

    Returns:
        Tuple of (items with any Tue->Wed change, best share of weeks with a
        change of at least ``min_change``)
    """
    wide = tue_wed_prices(session_prices[session_prices["upc"].isin(upcs)]).dropna()
    if wide.empty or n_weeks == 0:
        return 0, 0.0
    wide["delta"] = (wide["wed"] - wide["tue"]).abs()
    per_item = wide.groupby("upc")["delta"]
    n_varying = int(per_item.apply(lambda d: bool((d > tolerance).any())).sum())
    # Rounding guard so that a 10-cent change counts as 10 cents
    large = per_item.apply(lambda d: int((d >= min_change - 1e-9).sum()))
    return n_varying, float(large.max() / n_weeks)


def mean_abs_price_correlation(session_prices: pd.DataFrame, upcs: List[str]) -> float:
    """Average absolute pairwise correlation of item price series (0 if undefined)."""
    subset = session_prices[session_prices["upc"].isin(upcs)]
    if subset["upc"].nunique() < 2:
        return 0.0
    wide = subset.pivot_table(index=["week", "weekday"], columns="upc", values="price")
    corr = wide.corr().to_numpy()
    off_diag = corr[~np.eye(len(corr), dtype=bool)]
    off_diag = off_diag[np.isfinite(off_diag)]
    return float(np.abs(off_diag).mean()) if off_diag.size else 0.0


def herfindahl_by_upc(purchases: pd.DataFrame) -> pd.Series:
    """Herfindahl index of each UPC's daily demand shares over the sample period."""
    daily = purchases.groupby(["upc", "date"])["quantity"].sum()
    shares = daily / daily.groupby(level="upc").transform("sum")
    return (shares ** 2).groupby(level="upc").sum()
